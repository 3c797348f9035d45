"""Kernels of the delay-compensating backstepping transformation and its inverse.

Forward map (``x ∈ [0,1]``):

    w(x) = u(x) - ∫_0^x q(x,y) u(y) dy - γ(x) X - γ̄(x) V - ψ(x,t)

with ``q(x,y) = -D K B e^{DA(x-y)}``, ``γ(x) = -K e^{DAx}``,
``γ̄(x) = -K Ψ(Dx) - G_0 e^{DSx}`` and ``ψ(x,t) = -f/ϑ`` evaluated at the
state predicted ``Dx`` ahead. The inverse uses ``A_cl = A - BK``:
``q̄(x,y) = -D K B e^{DA_cl(x-y)}``, ``γ_1(x) = -K e^{DA_cl x}`` and
``γ̄_1(x) = -G_0 e^{DSx} - K Ψ_cl(Dx)`` where ``Ψ_cl`` is built from
``(A_cl, Ḡ - B G_0, S)``; ``ψ_1 = ψ + ∫ q̄ ψ``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..matkit import block_exp_offdiag, mat_exp
from .barrier import CBFChain
from .transforms import TransformCoeffs, convolve_profile, first_transform


@dataclass
class KernelSet:
    """Closed-form kernel evaluators for one parameter set."""

    coeffs: TransformCoeffs
    A: np.ndarray
    B: np.ndarray
    Gbar: np.ndarray
    S: np.ndarray
    D: float
    chain: CBFChain | None = None

    @property
    def A_cl(self) -> np.ndarray:
        return self.A - np.outer(self.B, self.coeffs.K)

    def gamma(self, x) -> np.ndarray:
        """``γ(x) = -K e^{DAx}``; (m, n) for array ``x``."""
        E = mat_exp(self.A, self.D * np.atleast_1d(np.asarray(x, dtype=float)))
        out = -np.einsum("j,mjk->mk", self.coeffs.K, E)
        return out[0] if np.ndim(x) == 0 else out

    def gamma_bar(self, x) -> np.ndarray:
        """``γ̄(x) = -K Ψ(Dx) - G_0 e^{DSx}``; ``γ̄(0) = -G_0``."""
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([
            -self.coeffs.K @ block_exp_offdiag(self.A, self.Gbar, self.S, self.D * xi)
            - self.coeffs.G0 @ mat_exp(self.S, self.D * xi)
            for xi in xs
        ])
        return out[0] if np.ndim(x) == 0 else out

    def q(self, x, y):
        """``q(x,y) = -D K e^{DA(x-y)} B`` (broadcasts over ``x - y``)."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        E = mat_exp(self.A, self.D * np.atleast_1d(d).ravel())
        vals = -self.D * np.einsum("j,mjk,k->m", self.coeffs.K, E, self.B)
        return vals.reshape(np.shape(d)) if np.ndim(d) else float(vals[0])

    def q_bar(self, x, y):
        """``q̄(x,y) = -D K e^{D A_cl (x-y)} B``."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        E = mat_exp(self.A_cl, self.D * np.atleast_1d(d).ravel())
        vals = -self.D * np.einsum("j,mjk,k->m", self.coeffs.K, E, self.B)
        return vals.reshape(np.shape(d)) if np.ndim(d) else float(vals[0])

    def gamma1(self, x) -> np.ndarray:
        """``γ_1(x) = -K e^{D A_cl x}``."""
        E = mat_exp(self.A_cl, self.D * np.atleast_1d(np.asarray(x, dtype=float)))
        out = -np.einsum("j,mjk->mk", self.coeffs.K, E)
        return out[0] if np.ndim(x) == 0 else out

    def gamma_bar1(self, x) -> np.ndarray:
        """``γ̄_1(x) = -G_0 e^{DSx} - K Ψ_cl(Dx)``."""
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        Gcl = self.Gbar - np.outer(self.B, self.coeffs.G0)
        out = np.array([
            -self.coeffs.G0 @ mat_exp(self.S, self.D * xi)
            - self.coeffs.K @ block_exp_offdiag(self.A_cl, Gcl, self.S, self.D * xi)
            for xi in xs
        ])
        return out[0] if np.ndim(x) == 0 else out

    def predicted_states(self, X, V, profile):
        """``X(t + D x_j)`` and ``V(t + D x_j)`` on the profile grid (trapezoid)."""
        profile = np.asarray(profile, dtype=float)
        N = len(profile) - 1
        x = np.linspace(0.0, 1.0, N + 1)
        J = convolve_profile(self.A, self.B, self.D, profile)
        EA = mat_exp(self.A, self.D * x)
        ES = mat_exp(self.S, self.D * x)
        Psi = np.array([block_exp_offdiag(self.A, self.Gbar, self.S, self.D * xi) for xi in x])
        Xp = EA @ np.asarray(X, dtype=float) + self.D * J + Psi @ np.asarray(V, dtype=float)
        Vp = ES @ np.asarray(V, dtype=float)
        return Xp, Vp

    def psi(self, X, V, profile, t: float) -> np.ndarray:
        """``ψ(x_j, t) = -f/ϑ`` at the state predicted ``D x_j`` ahead."""
        if self.chain is None:
            return np.zeros(len(profile))
        Xp, Vp = self.predicted_states(X, V, profile)
        Z = self.coeffs.T_z @ Xp.T + self.coeffs.T_v @ Vp.T  # (n, N+1)
        tau = t + self.D * np.linspace(0.0, 1.0, len(profile))
        bf = self.chain.drift_times_b(Z, tau)
        return -bf / (self.coeffs.b * self.chain.spec.theta(Z[0], tau))


def kernels(A, b: float, Gbar, S, Pbar_r, D: float, chain: CBFChain | None = None) -> KernelSet:
    """Build the kernel set for one parameter set."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    coeffs = first_transform(A, b, Gbar, S, Pbar_r)
    B = np.zeros(A.shape[0])
    B[-1] = b
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return KernelSet(coeffs, A, B, np.asarray(Gbar, dtype=float).reshape(A.shape[0], S.shape[0]), S, float(D),
                     chain)


def _volterra_matrix(kern, N: int) -> np.ndarray:
    """Trapezoid matrix ``M`` with ``(M u)_j ≈ ∫_0^{x_j} k(x_j - y) u(y) dy``."""
    x = np.linspace(0.0, 1.0, N + 1)
    dx = 1.0 / N
    kv = kern(x)  # k(d) on d = 0, dx, ..., 1
    M = np.zeros((N + 1, N + 1))
    for j in range(1, N + 1):
        M[j, :j + 1] = dx * kv[j::-1]
        M[j, 0] *= 0.5
        M[j, j] *= 0.5
    return M


def forward_backstep(u_field, X, V, t: float, ks: KernelSet) -> np.ndarray:
    """``w`` field on the profile grid (trapezoid Volterra quadrature)."""
    u = np.asarray(u_field, dtype=float)
    N = len(u) - 1
    x = np.linspace(0.0, 1.0, N + 1)
    Mq = _volterra_matrix(lambda d: ks.q(d, 0.0), N)
    return (u - Mq @ u - ks.gamma(x) @ np.asarray(X, dtype=float)
            - ks.gamma_bar(x) @ np.asarray(V, dtype=float) - ks.psi(X, V, u, t))


def inverse_backstep(w_field, X, V, t: float, ks: KernelSet, method: str = "discrete",
                     profile_for_psi=None) -> np.ndarray:
    """Recover ``u`` from ``w``.

    ``method="discrete"`` inverts the trapezoid forward map exactly by
    forward substitution (round trip to round-off). ``method="closed"``
    applies the closed-form inverse kernels with trapezoid quadrature
    (round trip error ``O(Δx²)``).

    ``ψ`` depends on ``u`` through the predictor, so the caller supplies
    the profile used for it (``profile_for_psi``); by default the
    forcing ``ψ`` is computed from the result of a first pass.
    """
    w = np.asarray(w_field, dtype=float)
    N = len(w) - 1
    x = np.linspace(0.0, 1.0, N + 1)
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    lin = ks.gamma(x) @ X + ks.gamma_bar(x) @ V
    if method == "discrete":
        Mq = _volterra_matrix(lambda d: ks.q(d, 0.0), N)
        Lop = np.eye(N + 1) - Mq

        def solve(psi):
            return np.linalg.solve(Lop, w + lin + psi)  # lower triangular
    elif method == "closed":
        Mb = _volterra_matrix(lambda d: ks.q_bar(d, 0.0), N)
        lin1 = ks.gamma1(x) @ X + ks.gamma_bar1(x) @ V

        def solve(psi):
            psi1 = psi + Mb @ psi
            return w + Mb @ w + lin1 + psi1
    else:
        raise ValueError(f"unknown inverse method {method!r}")
    if ks.chain is None:
        return solve(np.zeros(N + 1))
    if profile_for_psi is not None:
        return solve(ks.psi(X, V, profile_for_psi, t))
    # ψ(x) only uses u on [0, x]; fixed-point sweeps converge in at most N+1 passes
    u = solve(np.zeros(N + 1))
    for _ in range(N + 2):
        u_new = solve(ks.psi(X, V, u, t))
        if np.max(np.abs(u_new - u)) <= 1e-13 * max(1.0, np.max(np.abs(u_new))):
            return u_new
        u = u_new
    return u
