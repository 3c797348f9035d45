"""Chain-form change of coordinates and the state predictor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from ..matkit import block_exp_offdiag, mat_exp
from ..plant import is_strict_feedback


@dataclass(frozen=True)
class TransformCoeffs:
    """``Z = T_z X + T_v V`` maps the plant to an integrator chain.

    ``z_1 = x_1 - P̄_r V`` is the tracking error and ``z_{i+1} = ż_i`` for
    ``i < n``. In these coordinates ``ż_n = b (u + K X + G_0 V)``.

    Attributes
    ----------
    varrho : (n+1, n) rows of ``x``-coefficients; row i belongs to ``z_{i+1}``
        (row n is ``b K``)
    sigma : (n+1, n_v) rows ``σ_0..σ_n`` with ``T_v[i] = -(σ_{i-1} + P̄_r S^{i-1})``
    """

    varrho: np.ndarray
    sigma: np.ndarray
    T_z: np.ndarray
    T_v: np.ndarray
    K: np.ndarray
    G0: np.ndarray
    b: float

    @property
    def A_z(self) -> np.ndarray:
        n = self.T_z.shape[0]
        Az = np.zeros((n, n))
        Az[np.arange(n - 1), np.arange(1, n)] = 1.0
        return Az


def first_transform(A, b: float, Gbar, S, Pbar_r) -> TransformCoeffs:
    """Coefficients of the chain-form transformation.

    Row recursion: ``T_z[1] = e_1``, ``T_v[1] = -P̄_r``; for ``i < n``,
    ``T_z[i+1] = T_z[i] A`` and ``T_v[i+1] = T_z[i] Ḡ + T_v[i] S``.
    Then ``K = T_z[n] A / b`` and ``G_0 = (T_z[n] Ḡ + T_v[n] S) / b``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not is_strict_feedback(A, 1e-8 * max(1.0, float(np.abs(A).max()))):
        raise DomainError("A must be in strict-feedback form")
    n = A.shape[0]
    S = np.atleast_2d(np.asarray(S, dtype=float))
    nv = S.shape[0]
    Gbar = np.asarray(Gbar, dtype=float).reshape(n, nv)
    Pr = np.asarray(Pbar_r, dtype=float).reshape(nv)
    rows_x = np.zeros((n + 1, n))
    rows_v = np.zeros((n + 1, nv))
    rows_x[0, 0] = 1.0
    rows_v[0] = -Pr
    for i in range(n):
        rows_x[i + 1] = rows_x[i] @ A
        rows_v[i + 1] = rows_x[i] @ Gbar + rows_v[i] @ S
    T_z = rows_x[:n].copy()
    T_v = rows_v[:n].copy()
    K = rows_x[n] / b
    G0 = rows_v[n] / b
    # σ_{i-1} = -T_v[i] - P̄_r S^{i-1}  (i = 1..n+1)
    sigma = np.zeros((n + 1, nv))
    Sp = np.eye(nv)
    for i in range(n + 1):
        sigma[i] = -rows_v[i] - Pr @ Sp
        Sp = Sp @ S
    return TransformCoeffs(rows_x, sigma, T_z, T_v, K, G0, float(b))


def trapezoid_weights(N: int) -> np.ndarray:
    w = np.full(N + 1, 1.0 / N)
    w[0] = w[-1] = 0.5 / N
    return w


def convolve_profile(A, B, D: float, profile) -> np.ndarray:
    """``J_j = ∫_0^{x_j} e^{DA(x_j - y)} B u(y) dy`` on the profile grid (trapezoid).

    Returns an ``(N+1, n)`` array; ``J_0 = 0``.
    """
    profile = np.asarray(profile, dtype=float)
    N = len(profile) - 1
    dx = 1.0 / N
    A = np.atleast_2d(A)
    B = np.asarray(B, dtype=float).reshape(A.shape[0])
    E = mat_exp(A, D * dx)
    EB = E @ B
    J = np.zeros((N + 1, A.shape[0]))
    for j in range(1, N + 1):
        J[j] = E @ J[j - 1] + 0.5 * dx * (EB * profile[j - 1] + B * profile[j])
    return J


def predict_state(X, V, profile, A, b: float, Gbar, S, D: float, tau: float) -> np.ndarray:
    """Predicted ``X(t + τ)`` for ``τ ∈ [0, D]``.

    ``e^{Aτ} X + ∫_0^{τ/D} D e^{DA(τ/D - y)} B u(y) dy + Ψ(τ) V`` where the
    input integral uses the trapezoid rule on the profile grid (linear
    interpolation at ``τ/D`` when it falls between nodes) and
    ``Ψ(τ) = ∫_0^τ e^{A(τ-s)} Ḡ e^{Ss} ds`` is exact.
    """
    if tau < -1e-12 or tau > D * (1 + 1e-12):
        raise DomainError(f"prediction horizon {tau} outside [0, {D}]")
    tau = min(max(tau, 0.0), D)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    profile = np.asarray(profile, dtype=float)
    N = len(profile) - 1
    B = np.zeros(n)
    B[-1] = b
    s = tau / D
    x = np.linspace(0.0, 1.0, N + 1)
    ys = np.concatenate([x[x < s - 1e-14], [s]])
    us = np.interp(ys, x, profile)
    if len(ys) > 1:
        Es = mat_exp(A, D * (s - ys))  # (m, n, n)
        integrand = D * (Es @ B) * us[:, None]
        integ = np.trapezoid(integrand, ys, axis=0)
    else:
        integ = np.zeros(n)
    Psi = block_exp_offdiag(A, Gbar, S, tau)
    return mat_exp(A, tau) @ X + integ + Psi @ V
