"""Predictor-based safe control laws evaluated over banks of parameter candidates.

For a candidate ``θ = (A, b, Ḡ, S, P̄_r, D)`` the control is

    𝒰 = -K X(t+D) - G_0 V(t+D) - f(Z(t+D), t+D) / ϑ(z_1(t+D), t+D)

with ``X(t+D)`` from the predictor, ``V(t+D) = e^{SD} V`` and
``Z = T_z X + T_v V``. Expanding the predictor gives the usual kernel form
``∫ q(1,y) u dy + γ(1) X + γ̄(1) V + ψ(1,t)``. Every quantity that depends
only on the candidate is precomputed, so evaluating a whole grid is a few
batched matrix products.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from ..errors import ConfigurationError, NumericalError
from ..matkit import block_exp_offdiag, induced_norm
from .barrier import CBFChain, select_gains_from_samples
from .transforms import first_transform, trapezoid_weights

_IMPLICIT_MAX_ITER = 20


@dataclass(frozen=True)
class ThetaParams:
    """One complete parameter candidate."""

    A: np.ndarray
    b: float
    Gbar: np.ndarray
    S: np.ndarray
    Pbar_r: np.ndarray
    D: float

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def B(self) -> np.ndarray:
        B = np.zeros(self.n)
        B[-1] = self.b
        return B


def make_theta(A, S_d, GPd, S_r, P_r, b, D) -> ThetaParams:
    """Assemble a candidate from the identified blocks and the known reference model."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    S_d = np.atleast_2d(np.asarray(S_d, dtype=float)) if np.size(S_d) else np.zeros((0, 0))
    S_r = np.atleast_2d(np.asarray(S_r, dtype=float))
    nd, nr = S_d.shape[0], S_r.shape[0]
    S = sla.block_diag(S_d, S_r) if nd else S_r.copy()
    Gbar = np.zeros((n, nd + nr))
    Gbar[:, :nd] = np.asarray(GPd, dtype=float).reshape(n, nd)
    Pbar_r = np.concatenate([np.zeros(nd), np.asarray(P_r, dtype=float).reshape(nr)])
    return ThetaParams(A, float(b), Gbar, S, Pbar_r, float(D))


class ControlBank:
    """Precomputed predictor/transform data for a list of candidates.

    Parameters
    ----------
    thetas : candidates (all with the same dimensions)
    chain : CBF chain (gains, barrier, rescue) shared by all candidates
    N : number of delay-line cells of the measured input profile
    """

    def __init__(self, thetas, chain: CBFChain, N: int):
        thetas = list(thetas)
        if not thetas:
            raise ConfigurationError("empty parameter grid")
        self.thetas = thetas
        self.chain = chain
        self.N = N
        P = len(thetas)
        n = thetas[0].n
        nv = thetas[0].S.shape[0]
        self.P, self.n, self.nv = P, n, nv
        self.E = np.empty((P, n, n))
        self.W = np.empty((P, n, nv))
        self.ES = np.empty((P, nv, nv))
        self.Tz = np.empty((P, n, n))
        self.Tv = np.empty((P, n, nv))
        self.K = np.empty((P, n))
        self.G0 = np.empty((P, nv))
        self.b = np.empty(P)
        self.tD = np.empty(P)
        Ed = np.empty((P, n, n))
        dx = 1.0 / N
        for p, th in enumerate(thetas):
            D = th.D
            big = np.zeros((n + nv, n + nv))
            big[:n, :n] = th.A
            big[:n, n:] = th.Gbar
            big[n:, n:] = th.S
            Eb = sla.expm(big * D)
            self.E[p] = Eb[:n, :n]
            self.W[p] = Eb[:n, n:]
            self.ES[p] = Eb[n:, n:]
            Ed[p] = sla.expm(th.A * D * dx)
            tc = first_transform(th.A, th.b, th.Gbar, th.S, th.Pbar_r)
            self.Tz[p], self.Tv[p], self.K[p], self.G0[p] = tc.T_z, tc.T_v, tc.K, tc.G0
            self.b[p] = th.b
            self.tD[p] = D
        # kernel: kap[p, :, j] = D w_j e^{D A (1 - y_j)} B
        v = np.empty((P, n, N + 1))
        v[:, :, N] = 0.0
        v[:, -1, N] = self.b
        for j in range(N - 1, -1, -1):
            v[:, :, j] = np.einsum("pik,pk->pi", Ed, v[:, :, j + 1])
        self.kap = v * (trapezoid_weights(N) * self.tD[:, None])[:, None, :]

    # -- prediction -------------------------------------------------------
    def predict(self, X, V, profile):
        """Predicted ``X(t+θ_D)`` (P, n, Q) and ``V(t+θ_D)`` (P, nv, Q).

        ``X`` is (n,) or (n, Q); ``V`` is (nv,) or (nv, Q).
        """
        X = np.asarray(X, dtype=float)
        V = np.asarray(V, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if V.ndim == 1:
            V = V[:, None]
        Xp = np.einsum("pij,jq->piq", self.E, X) + np.einsum("pij,jq->piq", self.W, V)
        if profile is not None:
            Xp = Xp + (self.kap @ np.asarray(profile, dtype=float))[:, :, None]
        Vp = np.einsum("pij,jq->piq", self.ES, V)
        return Xp, Vp

    def horizon_chain(self, X, V, profile, t):
        """Chain coordinates ``Z(t+θ_D)`` as (n, P, Q) and horizon times (P, Q)."""
        Xp, Vp = self.predict(X, V, profile)
        Z = np.einsum("pij,pjq->ipq", self.Tz, Xp) + np.einsum("pij,pjq->ipq", self.Tv, Vp)
        tau = np.broadcast_to((t + self.tD)[:, None], Z.shape[1:])
        return Z, tau, Xp, Vp

    def _law(self, Xp, Vp, tau) -> np.ndarray:
        Z = np.einsum("pij,pjq->ipq", self.Tz, Xp) + np.einsum("pij,pjq->ipq", self.Tv, Vp)
        bf = self.chain.drift_times_b(Z, tau)
        th = self.chain.spec.theta(Z[0], tau)
        lin = np.einsum("pi,piq->pq", self.K, Xp) + np.einsum("pi,piq->pq", self.G0, Vp)
        return -lin - bf / (self.b[:, None] * th)

    def controls(self, X, V, profile, t, implicit: bool = True) -> np.ndarray:
        """𝒰 for every candidate and state sample, shape (P, Q).

        The measured profile ends with the previously applied input. With
        ``implicit=True`` that entry is replaced by the control itself,
        i.e. ``U = 𝒰(u)`` with ``u(1) = U`` is solved by secant steps (one
        step is exact for barriers affine in ``e``). The trapezoid rule
        gives ``u(1)`` the weight ``dx/2``; the explicit law therefore
        leaves the transformed field at the outlet off by about
        ``D dx |K B| / 2`` times the step-to-step change of ``U``.
        """
        _, tau, Xp, Vp = self.horizon_chain(X, V, profile, t)
        U = self._law(Xp, Vp, tau)
        if not implicit or profile is None:
            return U
        pN = float(np.asarray(profile)[-1])
        col = self.kap[:, :, -1][:, :, None]

        def g(u):
            return self._law(Xp + col * (u - pN)[:, None, :], Vp, tau)

        # secant on F(u) = g(u) - u started from (pN, U); exact after one step when g is affine
        u_a, F_a = np.full_like(U, pN), U - pN
        u_b = U
        for _ in range(_IMPLICIT_MAX_ITER):
            gb = g(u_b)
            F_b = gb - u_b
            if np.max(np.abs(F_b)) <= 1e-13 * max(1.0, float(np.max(np.abs(u_b)))):
                return gb
            dF = F_b - F_a
            ok = np.abs(dF) > 0
            step = np.where(ok, F_b * (u_b - u_a) / np.where(ok, dF, 1.0), F_b)
            u_a, F_a = u_b, F_b
            u_b = u_b - np.where(ok, step, -F_b)
        raise NumericalError("implicit boundary control did not converge")

    def barrier_at_horizon(self, X, V, t=0.0, profile=None) -> np.ndarray:
        """``h(e(t+θ_D), t+θ_D)`` for each candidate and sample, shape (P, Q)."""
        Z, tau, _, _ = self.horizon_chain(X, V, profile, t)
        return self.chain.spec.h(Z[0], tau)


def nominal_control(X, V, profile, theta: ThetaParams, chain: CBFChain, t: float, implicit: bool = True) -> float:
    """Nominal predictor CBF control for exactly known parameters."""
    N = len(profile) - 1
    return float(ControlBank([theta], chain, N).controls(X, V, profile, t, implicit)[0, 0])


def _ball_gradient_norm(bank: ControlBank, X, V, profile, t, dims_v, dims_x, step=1e-3):
    """Euclidean norm of ∂𝒰/∂ζ over the uncertain coordinates (central differences)."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    cols_x, cols_v = [], []
    for d in dims_v:
        for s in (+1, -1):
            Vp = V.copy()
            Vp[d] += s * step
            cols_x.append(X)
            cols_v.append(Vp)
    for d in dims_x:
        for s in (+1, -1):
            Xp = X.copy()
            Xp[d] += s * step
            cols_x.append(Xp)
            cols_v.append(V)
    if not cols_x:
        return np.zeros(bank.P)
    U = bank.controls(np.stack(cols_x, 1), np.stack(cols_v, 1), profile, t)  # (P, 2m)
    g = (U[:, 0::2] - U[:, 1::2]) / (2 * step)
    return np.sqrt(np.sum(g * g, axis=1))


def robust_control(bank: ControlBank, X, V, profile, t: float, theta0: float,
                   radius: float = 0.0, dims_v=(), dims_x=()):
    """``(1/ϑ_0) max_θ ϑ_0 𝒰`` over the bank, optionally over a state ball.

    The ball ``|ζ - χ̂| <= radius`` over the coordinates ``dims_v`` of ``V``
    and ``dims_x`` of ``X`` is handled by the first-order bound
    ``ϑ_0 𝒰(χ̂) + radius · |∇_ζ 𝒰|`` (exact when 𝒰 is affine in the state,
    as it is for barriers affine in ``e``).

    Returns
    -------
    U_a : float
    argmax : index of the maximizing candidate
    """
    U = bank.controls(X, V, profile, t)[:, 0]
    score = theta0 * U
    if radius > 0:
        score = score + radius * _ball_gradient_norm(bank, X, V, profile, t, dims_v, dims_x)
    p = int(np.argmax(score))  # first maximizer: deterministic
    return float(score[p] / theta0), p


def rho_hat_gain(theta: ThetaParams, xi_e: float | None) -> float:
    """``2 max{‖K e^{DA}‖, |γ̄(1)|, ξ_e}`` for the identified parameters."""
    if xi_e is None:
        from ..errors import MissingConstantError
        raise MissingConstantError("output-feedback compensation needs the Lipschitz constant xi_e")
    tc = first_transform(theta.A, theta.b, theta.Gbar, theta.S, theta.Pbar_r)
    Ke = tc.K @ sla.expm(theta.A * theta.D)
    Psi = block_exp_offdiag(theta.A, theta.Gbar, theta.S, theta.D)
    gbar1 = -tc.K @ Psi - tc.G0 @ sla.expm(theta.S * theta.D)
    return 2.0 * max(float(np.linalg.norm(Ke)), float(np.linalg.norm(gbar1)), float(xi_e))


def output_control(bank1: ControlBank, X_hat, V_hat, profile, t: float, theta0: float,
                   rho_hat: float, implicit: bool = True) -> float:
    """``𝒰(χ̂; Θ̂) + ϑ_0 ρ̂_e``."""
    return float(bank1.controls(X_hat, V_hat, profile, t, implicit)[0, 0]) + theta0 * rho_hat


def estimate_xi_e(bank: ControlBank, X_samples, V_samples, dims_v, dims_x, t=0.0) -> float:
    """Numerical Lipschitz estimate of ``ψ(1,t)`` in ``(V_d, X)`` (sum norm).

    Central-difference gradients of the nonlinear part ``-f/ϑ`` at each
    sample and candidate; the bound for the norm ``|Ṽ| + |X̃|`` is
    ``max(|∇_V|, |∇_X|)``. This is an estimate, not a certified constant.
    """
    best = 0.0
    step = 1e-4
    Xs = np.atleast_2d(X_samples)
    Vs = np.atleast_2d(V_samples)
    for X, V in zip(Xs, Vs):
        def psi(Xq, Vq):
            Z, tau, _, _ = bank.horizon_chain(Xq, Vq, None, t)
            bf = bank.chain.drift_times_b(Z, tau)
            return -bf / (bank.b[:, None] * bank.chain.spec.theta(Z[0], tau))

        gv, gx = [], []
        for d in dims_v:
            e = np.zeros_like(V)
            e[d] = step
            gv.append((psi(X, V + e) - psi(X, V - e))[:, 0] / (2 * step))
        for d in dims_x:
            e = np.zeros_like(X)
            e[d] = step
            gx.append((psi(X + e, V) - psi(X - e, V))[:, 0] / (2 * step))
        nv = np.sqrt(np.sum(np.square(gv), 0)) if gv else 0.0
        nx = np.sqrt(np.sum(np.square(gx), 0)) if gx else 0.0
        best = max(best, float(np.max(np.maximum(nv, nx))))
    return best


# -- uncertainty sets -----------------------------------------------------

@dataclass
class UncertaintyBoxes:
    """Interval uncertainty on selected matrix entries, ``b``, ``D`` and the initial state.

    Entries not listed in ``entries`` are known and equal to the nominal
    matrices. Initial estimates are the nominal matrices with uncertain
    entries at their interval midpoints.

    Attributes
    ----------
    A0, S_d0, GPd0 : nominal matrices (known structure)
    entries : list of ``(target, i, j, lo, hi)`` with target in {"A", "S_d", "GPd"}
    D_box : ``(D_lo, D_hi)``
    b_box : ``(b_lo, b_hi)``, or None when ``b = b_known``
    b_known : known input gain (used when ``b_box`` is None)
    state_lo, state_hi : bounds on ``ζ_0 = (V_d(0), X(0))`` (output feedback only)
    grid : points per uncertain dimension
    D0, b0 : initial estimates (default: midpoints)
    """

    A0: np.ndarray
    S_d0: np.ndarray
    GPd0: np.ndarray
    entries: list = field(default_factory=list)
    D_box: tuple = (1.0, 3.0)
    b_box: tuple | None = None
    b_known: float | None = None
    state_lo: np.ndarray | None = None
    state_hi: np.ndarray | None = None
    grid: int = 5
    D0: float | None = None
    b0: float | None = None

    def __post_init__(self):
        self.A0 = np.atleast_2d(np.asarray(self.A0, dtype=float))
        self.S_d0 = np.atleast_2d(np.asarray(self.S_d0, dtype=float))
        self.GPd0 = np.asarray(self.GPd0, dtype=float).reshape(self.A0.shape[0], self.S_d0.shape[0])
        self.entries = [tuple(e) for e in self.entries]
        for tgt, i, j, lo, hi in self.entries:
            if tgt not in ("A", "S_d", "GPd"):
                raise ConfigurationError(f"unknown uncertain matrix {tgt!r}")
            if not lo <= hi:
                raise ConfigurationError(f"empty interval for {tgt}[{i},{j}]")
        if not self.D_box[0] <= self.D_box[1] or self.D_box[0] <= 0:
            raise ConfigurationError("invalid delay interval")
        if self.b_box is None and self.b_known is None:
            raise ConfigurationError("either b_box or b_known is required")
        if self.b_box is not None and not (0 < self.b_box[0] <= self.b_box[1]):
            raise ConfigurationError("invalid input-gain interval")
        if self.grid < 1:
            raise ConfigurationError("grid needs at least one point per dimension")
        if self.state_lo is not None:
            self.state_lo = np.asarray(self.state_lo, dtype=float)
            self.state_hi = np.asarray(self.state_hi, dtype=float)
            if np.any(self.state_lo > self.state_hi):
                raise ConfigurationError("empty state interval")
        if self.D0 is None:
            self.D0 = 0.5 * (self.D_box[0] + self.D_box[1])
        if self.b0 is None:
            self.b0 = self.b_known if self.b_box is None else 0.5 * (self.b_box[0] + self.b_box[1])

    def _points(self, lo, hi):
        return np.array([lo]) if lo == hi or self.grid == 1 else np.linspace(lo, hi, self.grid)

    def _apply(self, values):
        mats = {"A": self.A0.copy(), "S_d": self.S_d0.copy(), "GPd": self.GPd0.copy()}
        for (tgt, i, j, _, _), v in zip(self.entries, values):
            mats[tgt][i, j] = v
        return mats["A"], mats["S_d"], mats["GPd"]

    def initial_theta1(self):
        return self._apply([0.5 * (lo + hi) for (_, _, _, lo, hi) in self.entries])

    def theta1_grid(self):
        axes = [self._points(lo, hi) for (_, _, _, lo, hi) in self.entries]
        return [self._apply(v) for v in itertools.product(*axes)] if axes else [self._apply([])]

    def theta2_grid(self):
        Ds = self._points(*self.D_box)
        bs = [self.b_known] if self.b_box is None else self._points(*self.b_box)
        return [(float(b), float(D)) for b in bs for D in Ds]

    def state_grid(self):
        if self.state_lo is None:
            return None
        axes = [self._points(lo, hi) for lo, hi in zip(self.state_lo, self.state_hi)]
        return np.array(list(itertools.product(*axes)))

    @property
    def uncertain_state_dims(self):
        if self.state_lo is None:
            return np.array([], dtype=int)
        return np.flatnonzero(self.state_hi > self.state_lo)

    @property
    def M0(self) -> float:
        """Bound on the initial observer error from the state-box widths."""
        if self.state_lo is None:
            return 0.0
        return float(np.sqrt(np.sum((self.state_hi - self.state_lo) ** 2)))

    def project_known(self, A, S_d, GPd, tol: float = 1e-6):
        """Snap entries the boxes declare known onto their known values.

        Only entries within ``tol`` (relative to ``max(1, |known|)``) of the
        known value are snapped; larger departures are left in place so
        that :meth:`violations` still reports them.
        """
        free = {(t, i, j) for (t, i, j, _, _) in self.entries}
        out = []
        for tgt, M, ref in (("A", A, self.A0), ("S_d", S_d, self.S_d0), ("GPd", GPd, self.GPd0)):
            M = np.array(M, dtype=float).reshape(ref.shape)
            for (i, j), v in np.ndenumerate(M):
                if (tgt, i, j) not in free and abs(v - ref[i, j]) <= tol * max(1.0, abs(ref[i, j])):
                    M[i, j] = ref[i, j]
            out.append(M)
        return tuple(out)

    def violations(self, A, S_d, GPd, b, D, state0=None, tol=1e-12) -> list[str]:
        """Human-readable list of truth values outside the configured sets."""
        out = []
        mats = {"A": np.atleast_2d(A), "S_d": np.atleast_2d(S_d), "GPd": np.asarray(GPd).reshape(self.GPd0.shape)}
        nominal = {"A": self.A0, "S_d": self.S_d0, "GPd": self.GPd0}
        free = {(t, i, j): (lo, hi) for (t, i, j, lo, hi) in self.entries}
        for tgt, M in mats.items():
            ref = nominal[tgt]
            if M.shape != ref.shape:
                out.append(f"{tgt} has shape {M.shape}, expected {ref.shape}")
                continue
            for (i, j), v in np.ndenumerate(M):
                if (tgt, i, j) in free:
                    lo, hi = free[(tgt, i, j)]
                    if not lo - tol <= v <= hi + tol:
                        out.append(f"{tgt}[{i},{j}] = {v} outside [{lo}, {hi}]")
                elif abs(v - ref[i, j]) > tol:
                    out.append(f"{tgt}[{i},{j}] = {v} differs from known value {ref[i, j]}")
        if not self.D_box[0] - tol <= D <= self.D_box[1] + tol:
            out.append(f"D = {D} outside [{self.D_box[0]}, {self.D_box[1]}]")
        if self.b_box is None:
            if abs(b - self.b_known) > tol:
                out.append(f"b = {b} differs from known value {self.b_known}")
        elif not self.b_box[0] - tol <= b <= self.b_box[1] + tol:
            out.append(f"b = {b} outside [{self.b_box[0]}, {self.b_box[1]}]")
        if state0 is not None and self.state_lo is not None:
            s = np.asarray(state0, dtype=float)
            bad = np.flatnonzero((s < self.state_lo - tol) | (s > self.state_hi + tol))
            for k in bad:
                out.append(f"initial state component {k} = {s[k]} outside [{self.state_lo[k]}, {self.state_hi[k]}]")
        return out


def bank_over(boxes: UncertaintyBoxes, S_r, P_r, chain: CBFChain, N: int, theta1=None, D_values=None,
              b_values=None) -> ControlBank:
    """Bank over (θ₁ grid or a pinned θ₁) × (b, D) grid."""
    t1 = boxes.theta1_grid() if theta1 is None else [theta1]
    t2 = boxes.theta2_grid()
    if D_values is not None or b_values is not None:
        Ds = D_values if D_values is not None else sorted({d for _, d in t2})
        bs = b_values if b_values is not None else sorted({b for b, _ in t2})
        t2 = [(b, D) for b in bs for D in Ds]
    thetas = [make_theta(A, S_d, GPd, S_r, P_r, b, D) for (A, S_d, GPd) in t1 for (b, D) in t2]
    return ControlBank(thetas, chain, N)


def h_eD_bounds(bank: ControlBank, X0_samples, V0_samples):
    """Min and max of ``h(e(θ_D), θ_D)`` over candidates and initial-state samples.

    The input profile is zero at ``t = 0``. Returns ``(h_lo, h_hi, verdict)``
    with verdict ``'safe'`` (lo > 0), ``'unsafe'`` (hi <= 0) or
    ``'ambiguous'`` (straddles zero; the start must be treated as unsafe).
    """
    X = np.atleast_2d(X0_samples).T
    V = np.atleast_2d(V0_samples).T
    h = bank.barrier_at_horizon(X, V, 0.0)
    lo, hi = float(h.min()), float(h.max())
    verdict = "safe" if lo > 0 else ("unsafe" if hi <= 0 else "ambiguous")
    return lo, hi, verdict


def gain_requirements(bank: ControlBank, X0_samples, V0_samples) -> np.ndarray:
    """Lower bounds ``max(0, k̂_i)`` required of a set of gains (last entry 0).

    The bounds for ``k_i`` depend on ``k_1..k_{i-1}``; the bank chain's
    own gains are used for those.
    """
    X = np.atleast_2d(X0_samples).T
    V = np.atleast_2d(V0_samples).T
    Z, tau, _, _ = bank.horizon_chain(X, V, None, 0.0)
    khat = bank.chain.gain_lower_bounds(Z.reshape(Z.shape[0], -1), tau.reshape(-1))
    req = np.zeros(bank.chain.n)
    if len(khat):
        req[:len(khat)] = np.maximum(0.0, khat.max(axis=1))
    return req


def select_gains(bank: ControlBank, X0_samples, V0_samples, margin: float = 0.1, fixed=None):
    """Gains satisfying ``k_i >= max(0, k̂_i)`` over every candidate and sample.

    With one candidate and one sample this is the exact rule; with a grid
    bank it is the robust rule (optionally over state samples).
    """
    X = np.atleast_2d(X0_samples).T
    V = np.atleast_2d(V0_samples).T
    Z, tau, _, _ = bank.horizon_chain(X, V, None, 0.0)
    Zf = Z.reshape(Z.shape[0], -1)
    tf = tau.reshape(-1)
    return select_gains_from_samples(bank.chain, Zf, tf, margin, fixed)


def max_entry_deviation(grid, ref) -> float:
    """Largest induced 2-norm distance between grid matrices and a reference."""
    return max(induced_norm(np.asarray(M) - ref) for M in grid)
