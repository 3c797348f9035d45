"""Extended state observer for ``(V_d, X)`` from the tracked output, with error envelopes.

Observer (``Y = x_1``):

    dX̂/dt   = Â X̂ + B U(t - D̂) + GP_d V̂_d + L_x (Y - C X̂)
    dV̂_d/dt = Ŝ_d V̂_d + L_v (Y - C X̂)

The error ``e_o = (V_d - V̂_d, X - X̂)`` obeys ``ė_o = 𝓛 e_o + Δe`` with

    𝓛 = [[S_d, -L_v C], [GP_d, A - L_x C]]

and ``Δe`` built from the parameter and delay mismatch. The envelopes
bound ``|e_o|`` on each phase of the identification timeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.signal import place_poles

from .errors import ConfigurationError, DesignError, NumericalError
from .matkit import induced_norm


@dataclass
class ObserverState:
    X_hat: np.ndarray
    V_hat: np.ndarray  # disturbance part only

    def Y_hat(self, C) -> float:
        return float(np.asarray(C) @ self.X_hat)

    def copy(self) -> "ObserverState":
        return ObserverState(self.X_hat.copy(), self.V_hat.copy())


@dataclass(frozen=True)
class GainSchedule:
    """Piecewise-constant gains: initial pair before ``switch_time``, designed pair after."""

    L_v0: np.ndarray
    L_x0: np.ndarray
    L_v: np.ndarray
    L_x: np.ndarray
    switch_time: float = 0.0

    def at(self, t: float):
        if t < self.switch_time - 1e-12:
            return self.L_v0, self.L_x0
        return self.L_v, self.L_x


def error_matrix(S_d, GPd, A, C, L_v, L_x) -> np.ndarray:
    """``[[S_d, -L_v C], [GP_d, A - L_x C]]``."""
    S_d = np.atleast_2d(np.asarray(S_d, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.asarray(C, dtype=float).reshape(1, -1)
    nd, n = S_d.shape[0], A.shape[0]
    GPd = np.asarray(GPd, dtype=float).reshape(n, nd)
    L_v = np.asarray(L_v, dtype=float).reshape(nd, 1)
    L_x = np.asarray(L_x, dtype=float).reshape(n, 1)
    return np.block([[S_d, -L_v @ C], [GPd, A - L_x @ C]])


def design_gains(A_hat, S_d_hat, GPd, C, target_spectrum=None, L_v0=None, L_x0=None,
                 switch_time: float = 0.0) -> GainSchedule:
    """Pole placement of the extended error matrix.

    The default target spectrum is ``-1, -1.5, -2, ...`` (distinct, real
    parts <= -1). Repeated targets are rejected so that the decay bound of
    the designed matrix keeps its constant-factor form.
    """
    S_d_hat = np.atleast_2d(np.asarray(S_d_hat, dtype=float)) if np.size(S_d_hat) else np.zeros((0, 0))
    A_hat = np.atleast_2d(np.asarray(A_hat, dtype=float))
    n, nd = A_hat.shape[0], S_d_hat.shape[0]
    C = np.asarray(C, dtype=float).reshape(1, n)
    m = n + nd
    ext = np.zeros((m, m))
    ext[:nd, :nd] = S_d_hat
    ext[nd:, :nd] = np.asarray(GPd, dtype=float).reshape(n, nd)
    ext[nd:, nd:] = A_hat
    Cbar = np.concatenate([np.zeros((1, nd)), C], axis=1)
    obs = np.vstack([Cbar @ np.linalg.matrix_power(ext, k) for k in range(m)])
    if np.linalg.matrix_rank(obs, tol=1e-10 * max(1.0, np.linalg.norm(obs))) < m:
        raise DesignError("extended pair is not observable; no Hurwitz observer gain exists")
    if target_spectrum is None:
        target_spectrum = -1.0 - 0.5 * np.arange(m)
    target = np.asarray(target_spectrum, dtype=complex)
    if len(target) != m:
        raise DesignError(f"need {m} target eigenvalues, got {len(target)}")
    if np.any(target.real >= 0):
        raise DesignError("target spectrum must lie in the open left half-plane")
    d = np.abs(target[:, None] - target[None, :])
    np.fill_diagonal(d, np.inf)
    if np.min(d) < 1e-8:
        raise DesignError("repeated target eigenvalues are not allowed")
    tgt = target.real if np.allclose(target.imag, 0) else target
    res = place_poles(ext.T, Cbar.T, tgt)
    L = res.gain_matrix.T.reshape(m)
    achieved = np.sort_complex(np.linalg.eigvals(ext - np.outer(L, Cbar)))
    if np.max(np.abs(achieved - np.sort_complex(target))) > 1e-6 * max(1.0, np.max(np.abs(target))):
        raise NumericalError(f"pole placement residual too large: {achieved} vs {target}")
    zv, zx = np.zeros(nd), np.zeros(n)
    return GainSchedule(zv if L_v0 is None else np.asarray(L_v0, dtype=float),
                        zx if L_x0 is None else np.asarray(L_x0, dtype=float),
                        L[:nd].copy(), L[nd:].copy(), switch_time)


@dataclass(frozen=True)
class ExpBound:
    """``‖e^{Lt}‖ <= M(t) e^{-δ t}`` for ``t >= 0``.

    ``M(t)`` is the smaller of the eigenvector condition number (when ``L``
    is diagonalizable) and the Schur-form polynomial
    ``Σ_{k<n} (‖N‖ t)^k / k!`` where ``N`` is the strictly upper part of
    the complex Schur form. Both are valid bounds; the polynomial covers
    defective matrices.
    """

    delta: float
    kappa: float  # inf when L is defective or numerically so
    n_norm: float
    n: int

    def M(self, t):
        t = np.asarray(t, dtype=float)
        x = self.n_norm * t
        poly = np.zeros_like(x)
        term = np.ones_like(x)
        for k in range(self.n):
            poly = poly + term
            term = term * x / (k + 1)
        return np.minimum(self.kappa, poly)

    def __call__(self, t):
        return self.M(t) * np.exp(-self.delta * np.asarray(t, dtype=float))

    @property
    def defective(self) -> bool:
        return not np.isfinite(self.kappa)


def exp_bound(L, kappa_max: float = 1e8) -> ExpBound:
    """Decay pair ``(M_L(·), δ)`` with ``δ = -max Re eig(L)``."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    n = L.shape[0]
    T, _ = sla.schur(L.astype(complex), output="complex")
    lam = np.diag(T)
    delta = float(-np.max(lam.real))
    Nn = float(np.linalg.norm(np.triu(T, 1), 2))
    # repeated but non-defective eigenvalues (e.g. -I) still admit the constant factor
    lam_e, P = np.linalg.eig(L)
    kappa = np.inf
    c = float(np.linalg.cond(P))
    if c < kappa_max and np.abs(L @ P - P * lam_e).max() <= 1e-12 * max(1.0, np.abs(L).max()) * c:
        kappa = c
    return ExpBound(delta, kappa, Nn, n)


def worst_case_pre_pair(theta1_grid, C, L_v0, L_x0, horizon: float):
    """``(M̄, δ̄)`` with ``‖e^{L_0(θ₁) t}‖ <= M̄ e^{-δ̄ t}`` for every grid θ₁ and ``t <= horizon``.

    ``δ̄`` is the worst decay rate over the grid; since each ``M(t)`` is
    nondecreasing, ``M̄ = max M_θ(horizon)``.
    """
    deltas, Ms = [], []
    for A, S_d, GPd in theta1_grid:
        eb = exp_bound(error_matrix(S_d, GPd, A, C, L_v0, L_x0))
        deltas.append(eb.delta)
        Ms.append(float(eb.M(horizon)))
    return float(max(Ms)), float(min(deltas))


def mismatch_bounds(theta1_grid, A0, S_d0):
    """``(δ_A, δ_{S_d})``: largest induced 2-norm of grid minus initial estimate."""
    dA = max(induced_norm(np.asarray(A) - A0) for A, _, _ in theta1_grid)
    dS = max(induced_norm(np.atleast_2d(S) - S_d0) for _, S, _ in theta1_grid) if np.size(S_d0) else 0.0
    return float(dA), float(dS)


class ControlHistory:
    """Boundary control log on the simulation grid; ``U(s) = U_init`` for ``s < 0``."""

    def __init__(self, dt: float, capacity: int, U_init: float = 0.0):
        self.dt = dt
        self.values = np.zeros(capacity)
        self.count = 0
        self.U_init = U_init

    def append(self, U: float):
        if self.count >= len(self.values):
            self.values = np.concatenate([self.values, np.zeros(len(self.values))])
        self.values[self.count] = U
        self.count += 1

    def index(self, s: float) -> int:
        return int(np.floor(s / self.dt + 1e-9))

    def sample(self, k: int) -> float:
        if k < 0:
            return self.U_init
        if k >= self.count:
            raise ConfigurationError(f"control history does not cover t = {k * self.dt:.6g}")
        return float(self.values[k])

    def at(self, s: float) -> float:
        """Piecewise-linear interpolant of the logged samples at time ``s``."""
        x = s / self.dt
        k = int(np.floor(x + 1e-9))
        w = x - k
        if w <= 1e-9:
            return self.sample(k)
        return (1.0 - w) * self.sample(k) + w * self.sample(k + 1)

    def spread(self, t: float, D_lo: float, D_hi: float) -> float:
        """``max - min`` of ``U`` over ``[t - D_hi, t - D_lo]`` (``δ_U``)."""
        k0, k1 = self.index(t - D_hi), self.index(t - D_lo)
        if k1 >= self.count:
            raise ConfigurationError(f"control history does not cover t = {t - D_lo:.6g}")
        vals = []
        if k0 < 0:
            vals.append(self.U_init)
        lo, hi = max(k0, 0), k1
        if hi >= lo:
            seg = self.values[lo:hi + 1]
            vals.extend([seg.min(), seg.max()])
        if not vals:
            return 0.0
        return float(max(vals) - min(vals))


def _rhs(Xh, Vh, Y, U_del, A_hat, S_d_hat, GPd, B, C, L_v, L_x):
    innov = Y - C @ Xh
    dX = A_hat @ Xh + B * U_del + GPd @ Vh + L_x * innov
    dV = S_d_hat @ Vh + L_v * innov
    return dX, dV


def observer_step(obs: ObserverState, Y_stages, U_stages, A_hat, S_d_hat, GPd, b: float,
                  L_v, L_x, dt: float) -> ObserverState:
    """One RK4 step.

    ``Y_stages = (Y(t), Y(t + dt/2), Y(t + dt))`` and ``U_stages`` holds
    the delayed input ``U(s - D̂)`` at the same three instants (a scalar
    is held over the step).
    """
    A_hat = np.atleast_2d(A_hat)
    n = A_hat.shape[0]
    B = np.zeros(n)
    B[-1] = b
    C = np.zeros(n)
    C[0] = 1.0
    S_d_hat = np.atleast_2d(S_d_hat)
    GPd = np.asarray(GPd, dtype=float).reshape(n, -1)
    L_v = np.asarray(L_v, dtype=float)
    L_x = np.asarray(L_x, dtype=float)
    Y0, Ym, Y1 = Y_stages
    U0, Um, U1 = (U_stages,) * 3 if np.ndim(U_stages) == 0 else U_stages
    args = (A_hat, S_d_hat, GPd, B, C, L_v, L_x)
    X, V = obs.X_hat, obs.V_hat
    k1x, k1v = _rhs(X, V, Y0, U0, *args)
    k2x, k2v = _rhs(X + 0.5 * dt * k1x, V + 0.5 * dt * k1v, Ym, Um, *args)
    k3x, k3v = _rhs(X + 0.5 * dt * k2x, V + 0.5 * dt * k2v, Ym, Um, *args)
    k4x, k4v = _rhs(X + dt * k3x, V + dt * k3v, Y1, U1, *args)
    return ObserverState(X + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x),
                         V + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))


def midpoint_value(Y_hist, k: int) -> float:
    """``Y(t_k + dt/2)`` by the cubic through samples ``k-2 .. k+1`` (fewer near the start)."""
    if k >= 2:
        return float(0.0625 * Y_hist[k - 2] - 0.3125 * Y_hist[k - 1] + 0.9375 * Y_hist[k] + 0.3125 * Y_hist[k + 1])
    if k == 1:
        return float(-0.125 * Y_hist[0] + 0.75 * Y_hist[1] + 0.375 * Y_hist[2])
    return float(0.5 * (Y_hist[0] + Y_hist[1]))


class ErrorEnvelope:
    """Running bounds on the observer error norm along the identification timeline.

    Phases: ``t < D̲`` uses the worst-case pre-switch pair and
    ``Γ_1 = δ_{S_d}|V̂_d| + δ_A|X̂| + b δ_U``; ``D̲ <= t < t_f`` uses the
    designed matrix and ``Γ_2 = b δ_U``; after ``t_f`` the bound is the
    free decay of ``Γ_{e,2}(t_f)``. ``rho(t)`` returns ``√2`` times the
    bound on ``|e_o|``. Integrals use the running trapezoid rule on the
    simulation grid.
    """

    def __init__(self, M0: float, pre_pair, post: ExpBound, delta_A: float, delta_S: float, b_bound: float,
                 D_lower: float, dt: float):
        self.M0 = M0
        self.Mbar, self.dbar = pre_pair
        self.post = post
        self.delta_A, self.delta_S, self.b_bound = delta_A, delta_S, b_bound
        self.D_lower = D_lower
        self.dt = dt
        self._I1 = 0.0
        self._g_prev = None
        self._k_switch = None  # grid index of D̲
        self._gam2 = []  # Γ_2 samples from D̲ on
        self._Ge1_switch = None
        self._Ge2_tf = None
        self._k_tf = None
        self._kernel = None

    def gamma1(self, X_hat, V_hat, dU: float) -> float:
        return float(self.delta_S * np.linalg.norm(V_hat) + self.delta_A * np.linalg.norm(X_hat)
                     + self.b_bound * dU)

    def _kernel_upto(self, m: int) -> np.ndarray:
        if self._kernel is None or len(self._kernel) < m + 1:
            size = max(m + 1, 2 * (0 if self._kernel is None else len(self._kernel)), 1024)
            s = self.dt * np.arange(size)
            self._kernel = self.post(s)
        return self._kernel[:m + 1]

    def update(self, k: int, t: float, X_hat, V_hat, dU: float, t_f: float | None) -> float:
        """Register the sample at grid index ``k`` (time ``t``) and return ``ρ(t)``.

        Must be called for consecutive ``k`` starting at 0.
        """
        dt = self.dt
        if self._k_tf is None and t_f is not None and t >= t_f - 1e-9:
            # freeze Γ_{e,2}(t_f) (or Γ_{e,1}(t_f) if t_f coincides with D̲)
            if self._k_switch is None:
                self._enter_switch(k, t, X_hat, V_hat, dU)
            else:
                self._gam2.append(self.b_bound * dU)
            self._k_tf = k
            self._Ge2_tf = self._gamma_e2(k)
        if self._k_tf is not None:
            s = (k - self._k_tf) * dt
            return float(np.sqrt(2.0) * self._Ge2_tf * self.post(s))
        if t < self.D_lower - 1e-9:
            g = self.gamma1(X_hat, V_hat, dU)
            if self._g_prev is None:
                self._I1 = 0.0
            else:
                e = np.exp(-self.dbar * dt)
                self._I1 = e * self._I1 + self.Mbar * dt * 0.5 * (e * self._g_prev + g)
            self._g_prev = g
            Ge1 = self.M0 * self.Mbar * np.exp(-self.dbar * t) + self._I1
            return float(np.sqrt(2.0) * Ge1)
        if self._k_switch is None:
            self._enter_switch(k, t, X_hat, V_hat, dU)
        else:
            self._gam2.append(self.b_bound * dU)
        return float(np.sqrt(2.0) * self._gamma_e2(k))

    def _enter_switch(self, k, t, X_hat, V_hat, dU):
        # close the pre-switch integral at t = D̲ (this sample) and start the second phase
        g = self.gamma1(X_hat, V_hat, dU)
        if self._g_prev is not None:
            e = np.exp(-self.dbar * self.dt)
            self._I1 = e * self._I1 + self.Mbar * self.dt * 0.5 * (e * self._g_prev + g)
        self._Ge1_switch = self.M0 * self.Mbar * np.exp(-self.dbar * t) + self._I1
        self._k_switch = k
        self._gam2 = [self.b_bound * dU]

    def _gamma_e2(self, k: int) -> float:
        m = k - self._k_switch
        ker = self._kernel_upto(m)
        g = np.asarray(self._gam2[:m + 1])
        conv = 0.0
        if m > 0:
            vals = ker[m::-1] * g  # kernel(t - τ_j) Γ_2(τ_j)
            conv = self.dt * (vals.sum() - 0.5 * (vals[0] + vals[-1]))
        return float(self._Ge1_switch * ker[m] + conv)


def write_observer_trace(path, t, X_hat, V_hat, eo_norm, rho):
    """CSV ``t,xhat…,vdhat…,eo_norm,rho_envelope``."""
    X_hat = np.atleast_2d(X_hat)
    V_hat = np.atleast_2d(V_hat)
    n, nd = X_hat.shape[1], V_hat.shape[1]
    cols = ["t"] + [f"xhat{i + 1}" for i in range(n)] + [f"vdhat{i + 1}" for i in range(nd)] \
        + ["eo_norm", "rho_envelope"]
    data = np.column_stack([t, X_hat, V_hat, eo_norm, rho])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.10g")
