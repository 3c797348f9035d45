"""Ground-truth plant: strict-feedback system, exosystem and input delay line.

The input delay is modelled as the transport equation ``D u_t = u_x`` on
``x in [0, 1]`` with boundary input ``u(1, t) = U(t)``; the plant sees
``u(0, t) = U(t - D)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, SamplingWindowError
from .matkit import kalman_rank, mat_exp


def is_strict_feedback(A, tol: float = 0.0) -> bool:
    """Ones on the superdiagonal, zeros strictly above it."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            target = 1.0 if j == i + 1 else 0.0
            if abs(A[i, j] - target) > tol:
                return False
    return True


@dataclass(frozen=True)
class StrictFeedbackSystem:
    """``X' = A X + B U(t - D) + G d`` with ``B = (0, ..., 0, b)``, ``Y = x_1``."""

    A: np.ndarray
    b: float
    G: np.ndarray
    D: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A must be square")
        G = np.asarray(self.G, dtype=float).reshape(n, -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "D", float(self.D))
        if not is_strict_feedback(A):
            raise ConfigurationError("A is not in strict-feedback form (unit superdiagonal, zeros above)")
        if not self.b > 0:
            raise ConfigurationError("input gain b must be positive")
        if not self.D > 0:
            raise ConfigurationError("delay D must be positive")
        if kalman_rank(A, self.B) < n:
            raise ConfigurationError("(A, B) is not controllable")
        if kalman_rank(A.T, self.C.T) < n:
            raise ConfigurationError("(C, A) is not observable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def B(self) -> np.ndarray:
        B = np.zeros(self.n)
        B[-1] = self.b
        return B

    @property
    def C(self) -> np.ndarray:
        C = np.zeros(self.n)
        C[0] = 1.0
        return C


@dataclass(frozen=True)
class Exosystem:
    """Disturbance and reference generator ``V' = S V``, ``S = diag(S_d, S_r)``.

    ``d = P_d V_d`` and ``r = P_r V_r``.
    """

    S_d: np.ndarray
    P_d: np.ndarray
    S_r: np.ndarray
    P_r: np.ndarray

    def __post_init__(self):
        S_d = np.atleast_2d(np.asarray(self.S_d, dtype=float))
        S_r = np.atleast_2d(np.asarray(self.S_r, dtype=float))
        P_d = np.asarray(self.P_d, dtype=float).reshape(-1, S_d.shape[0])
        P_r = np.asarray(self.P_r, dtype=float).reshape(S_r.shape[0])
        object.__setattr__(self, "S_d", S_d)
        object.__setattr__(self, "S_r", S_r)
        object.__setattr__(self, "P_d", P_d)
        object.__setattr__(self, "P_r", P_r)
        S = self.S
        if S.size:
            ev = np.linalg.eigvals(S)
            # defective zero blocks (polynomial references) perturb eigenvalues ~ eps^(1/k)
            tol = 1e-6 * max(1.0, np.abs(S).max())
            if np.max(np.abs(ev.real)) > tol:
                raise ConfigurationError("exosystem eigenvalues must lie on the imaginary axis")
        if S_d.size and kalman_rank(S_d.T, P_d.T) < S_d.shape[0]:
            raise ConfigurationError("(P_d, S_d) is not observable")
        if S_r.size and kalman_rank(S_r.T, P_r.reshape(1, -1).T) < S_r.shape[0]:
            raise ConfigurationError("(P_r, S_r) is not observable")

    @property
    def n_d(self) -> int:
        return self.S_d.shape[0]

    @property
    def n_r(self) -> int:
        return self.S_r.shape[0]

    @property
    def n_v(self) -> int:
        return self.n_d + self.n_r

    @property
    def S(self) -> np.ndarray:
        S = np.zeros((self.n_v, self.n_v))
        S[: self.n_d, : self.n_d] = self.S_d
        S[self.n_d :, self.n_d :] = self.S_r
        return S

    @property
    def Pbar_d(self) -> np.ndarray:
        return np.hstack([self.P_d, np.zeros((self.P_d.shape[0], self.n_r))])

    @property
    def Pbar_r(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n_d), self.P_r])

    def Gbar(self, G) -> np.ndarray:
        """Disturbance input matrix acting on the full exosystem state."""
        return np.asarray(G, dtype=float) @ self.Pbar_d


def exo_propagate(V, exo: Exosystem, tau: float) -> np.ndarray:
    """``e^{S tau} V``."""
    return mat_exp(exo.S, tau) @ np.asarray(V, dtype=float)


@dataclass
class DelayLine:
    """Sampled transport state ``u(x_j, t)`` on a uniform grid of [0, 1].

    ``values[-1]`` is the most recently applied boundary input and
    ``values[0]`` is the input currently delivered to the plant.

    Modes
    -----
    upwind
        First-order upwind for ``D u_t = u_x`` with ``N`` cells.
    exact
        Method of characteristics: the grid is chosen so one time step moves
        the profile by exactly one cell (``N = D / dt``). This is a ring
        buffer of past inputs and carries no discretization error.
    """

    D: float
    N: int
    mode: str = "upwind"
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mode not in ("upwind", "exact"):
            raise ConfigurationError(f"unknown delay-line mode {self.mode!r}")
        if self.N < 1:
            raise ConfigurationError("delay line needs at least one cell")
        if self.values is None:
            self.values = np.zeros(self.N + 1)

    @classmethod
    def for_grid(cls, D: float, dt: float, mode: str = "upwind", N: int = 100) -> "DelayLine":
        if mode == "exact":
            M = D / dt
            Mi = int(round(M))
            if abs(M - Mi) > 1e-9 * max(1.0, M) or Mi < 1:
                raise ConfigurationError(f"exact delay mode needs D/dt integral, got {M}")
            return cls(D, Mi, "exact")
        return cls(D, N, "upwind")

    @property
    def dx(self) -> float:
        return 1.0 / self.N

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N + 1)

    @property
    def u0(self) -> float:
        return float(self.values[0])

    def courant(self, dt: float) -> float:
        return dt / (self.D * self.dx)

    def advanced(self, U_now: float, dt: float) -> "DelayLine":
        """Profile after one step with boundary value ``U_now``."""
        lam = self.courant(dt)
        if self.mode == "exact":
            if abs(lam - 1.0) > 1e-9:
                raise ConfigurationError("exact delay mode requires dt = D/N")
            new = np.empty_like(self.values)
            new[:-1] = self.values[1:]
        else:
            if lam > 1.0 + 1e-12:
                raise ConfigurationError(f"CFL violated: dt/(D dx) = {lam:.4f} > 1")
            v = self.values
            new = np.empty_like(v)
            new[:-1] = v[:-1] + lam * (v[1:] - v[:-1])
        new[-1] = U_now
        return replace(self, values=new)

    def next_u0(self, dt: float) -> float:
        """``u(0, t + dt)``; independent of the next boundary value for ``N >= 2``."""
        v = self.values
        if self.mode == "exact":
            return float(v[1])
        return float(v[0] + self.courant(dt) * (v[1] - v[0]))

    def preview(self) -> np.ndarray:
        """Profile seen by a controller before the current input is chosen.

        This is the profile one step ahead with the boundary held at the
        last applied value (zero-order hold).
        """
        v = self.values
        if self.mode == "exact":
            out = np.empty_like(v)
            out[:-1] = v[1:]
            out[-1] = v[-1]
            return out
        return v.copy()


@dataclass
class TruthState:
    t: float
    X: np.ndarray
    V_d: np.ndarray
    V_r: np.ndarray
    line: DelayLine
    # low-order bits lost when adding each increment to X (compensated summation)
    X_carry: np.ndarray | None = None

    @property
    def V(self) -> np.ndarray:
        return np.concatenate([self.V_d, self.V_r])


class TruthStepper:
    """Caches per-step exponentials for repeated calls of :func:`step_truth`."""

    def __init__(self, sys: StrictFeedbackSystem, exo: Exosystem, dt: float):
        self.sys, self.exo, self.dt = sys, exo, float(dt)
        S = exo.S
        self.E_half = mat_exp(S, dt / 2)
        self.E_full = mat_exp(S, dt)
        self.Gbar = exo.Gbar(sys.G)

    def __call__(self, state: TruthState, U_now: float) -> TruthState:
        sys, dt = self.sys, self.dt
        line = state.line.advanced(U_now, dt)
        u_a = line.u0
        u_b = line.next_u0(dt)
        u_m = 0.5 * (u_a + u_b)
        A, B, Gb = sys.A, sys.B, self.Gbar
        V0 = state.V
        Vh = self.E_half @ V0
        V1 = self.E_full @ V0

        def rhs(X, V, u):
            return A @ X + B * u + Gb @ V

        X = state.X
        k1 = rhs(X, V0, u_a)
        k2 = rhs(X + 0.5 * dt * k1, Vh, u_m)
        k3 = rhs(X + 0.5 * dt * k2, Vh, u_m)
        k4 = rhs(X + dt * k3, V1, u_b)
        # compensated summation keeps the snapshots used for identification
        # free of accumulated rounding drift
        inc = dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if state.X_carry is not None:
            inc = inc - state.X_carry
        Xn = X + inc
        carry = (Xn - X) - inc
        nd = self.exo.n_d
        return TruthState(state.t + dt, Xn, V1[:nd], V1[nd:], line, carry)


def step_truth(state: TruthState, sys: StrictFeedbackSystem, exo: Exosystem, U_now: float, dt: float) -> TruthState:
    """Advance the ground truth by one step ``dt`` with boundary input ``U_now``.

    The delay line is updated first; the delivered input ``u(0, ·)`` is then
    interpolated linearly across the step (the boundary signal is the
    piecewise-linear interpolant of the applied samples, which is what the
    trapezoid predictor assumes) while ``X`` is integrated with RK4 and
    ``V`` is propagated exactly.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    return TruthStepper(sys, exo, dt)(state, U_now)


def initial_state(sys: StrictFeedbackSystem, exo: Exosystem, X0, V_d0, V_r0, dt: float,
                  mode: str = "upwind", N: int = 100) -> TruthState:
    X0 = np.asarray(X0, dtype=float).reshape(sys.n)
    V_d0 = np.asarray(V_d0, dtype=float).reshape(exo.n_d)
    V_r0 = np.asarray(V_r0, dtype=float).reshape(exo.n_r)
    line = DelayLine.for_grid(sys.D, dt, mode, N)
    if line.courant(dt) > 1.0 + 1e-12:
        raise ConfigurationError(f"CFL violated: dt/(D dx) = {line.courant(dt):.4f} > 1")
    return TruthState(0.0, X0, V_d0, V_r0, line)


def simulate_open_loop(sys, exo, X0, V_d0, V_r0, dt, T, U=None, mode="upwind", N=100):
    """Integrate the truth over ``[0, T]`` with a prescribed input ``U(t)``.

    Returns
    -------
    t : (K+1,) array
    X : (K+1, n) array
    V : (K+1, n_v) array
    u0 : (K+1,) delivered input ``u(0, t_k)`` at the start of each step; the
        truth interpolates linearly between consecutive entries (last entry repeats)
    """
    state = initial_state(sys, exo, X0, V_d0, V_r0, dt, mode, N)
    stepper = TruthStepper(sys, exo, dt)
    K = int(round(T / dt))
    ts = np.arange(K + 1) * dt
    Xs = np.empty((K + 1, sys.n))
    Vs = np.empty((K + 1, exo.n_v))
    u0 = np.zeros(K + 1)
    Xs[0], Vs[0] = state.X, state.V
    for k in range(K):
        Uk = 0.0 if U is None else float(U(ts[k]))
        state = stepper(state, Uk)
        u0[k] = state.line.u0
        Xs[k + 1], Vs[k + 1] = state.X, state.V
    u0[K] = u0[K - 1] if K else 0.0
    return ts, Xs, Vs, u0


def sample_snapshots(t, traj, T_d: float, count: int, window: float | None = None) -> np.ndarray:
    """Snapshots at ``k T_d``, ``k = 0..count-1``, linearly interpolated.

    Parameters
    ----------
    t : (K,) increasing sample times of the trajectory
    traj : (K,) or (K, m) trajectory values (output or full state)
    window : maximal admissible sampling horizon (the lower delay bound)

    Returns
    -------
    (m, count) matrix of snapshots, or (count,) for scalar trajectories.
    """
    t = np.asarray(t, dtype=float)
    traj = np.asarray(traj, dtype=float)
    last = T_d * (count - 1)
    if window is not None and last > window * (1 + 1e-12) + 1e-12:
        raise SamplingWindowError(
            f"snapshot window {last:.6g} exceeds {window:.6g}; need T_d <= window/(count-1)"
        )
    if last > t[-1] + 1e-12:
        raise SamplingWindowError("trajectory does not cover the sampling window")
    ts = T_d * np.arange(count)
    if traj.ndim == 1:
        return np.interp(ts, t, traj)
    return np.stack([np.interp(ts, t, traj[:, i]) for i in range(traj.shape[1])])
