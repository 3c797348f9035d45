"""Dense matrix helpers used throughout the package.

Thin, validated wrappers over numpy/scipy with the tolerances the
identification and control code relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConjugatePairingError, DimensionError, NumericalError, RankDeficiencyError

# eigenvector condition number above which the eigen route of mat_exp is not trusted
_EXP_KAPPA_MAX = 1e4


def _square(M) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    return M


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues with paired right eigenvectors (column i <-> eigenvalue i).

    Attributes
    ----------
    eigenvalues : (n,) complex array
    vectors : (n, n) complex array of unit-norm right eigenvectors
    simple : bool
        False when two eigenvalues are closer than ``gap_tol``.
    min_gap : float
        Smallest pairwise eigenvalue distance (inf for n <= 1).
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    simple: bool
    min_gap: float

    def reconstruct(self) -> np.ndarray:
        V = self.vectors
        return V @ np.diag(self.eigenvalues) @ np.linalg.inv(V)


def eig_simple(M, gap_rel: float = 1e-8) -> Spectrum:
    """Full eigendecomposition with a repeated-eigenvalue flag.

    Two eigenvalues count as repeated when their distance is below
    ``gap_rel * max(||M||, 1)``.
    """
    M = _square(M)
    # entries this far below the largest one are invisible at double precision,
    # but near-underflow values can derail LAPACK's balancing
    big = np.abs(M).max() if M.size else 0.0
    M = np.where(np.abs(M) < 1e-100 * big, 0.0, M)
    try:
        w, V = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"eigenvalue iteration failed to converge: {exc}") from exc
    # balancing can still return a wrong vector when entries span many decades;
    # replace any such column by the null vector of M - λI
    tol = 1e-10 * max(1.0, big)
    bad = np.flatnonzero(np.abs(M @ V - V * w).max(axis=0) > tol)
    if bad.size:
        V = V.astype(complex)
        eye = np.eye(M.shape[0])
        for j in bad:
            V[:, j] = np.linalg.svd(M - w[j] * eye)[2][-1].conj()
    n = len(w)
    if n > 1:
        d = np.abs(w[:, None] - w[None, :])
        d[np.diag_indices(n)] = np.inf
        gap = float(d.min())
    else:
        gap = float("inf")
    scale = max(np.linalg.norm(M, 2), 1.0)
    return Spectrum(w, V, gap >= gap_rel * scale, gap)


def mat_exp(M, t=1.0) -> np.ndarray:
    """Matrix exponential ``e^{M t}``.

    ``t`` may be a scalar or a 1-D array; for an array the result is
    stacked along a leading axis. The diagonalization route is used when
    the spectrum is simple and the eigenvector basis is well conditioned
    (it is then also the cheap way to evaluate many ``t`` at once);
    otherwise scipy's scaling-and-squaring Pade routine is used.
    """
    M = _square(M)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    scalar = np.ndim(t) == 0
    n = M.shape[0]
    if n == 0:
        out = np.zeros((len(ts), 0, 0))
        return out[0] if scalar else out
    out = None
    sp = eig_simple(M)
    if sp.simple:
        V = sp.vectors
        kappa = np.linalg.cond(V)
        resid = np.abs(M @ V - V * sp.eigenvalues).max()
        if kappa < _EXP_KAPPA_MAX and resid <= 1e-12 * max(1.0, np.abs(M).max()):
            Vi = np.linalg.inv(V)
            E = np.exp(np.multiply.outer(ts, sp.eigenvalues))  # (T, n)
            out = np.einsum("ij,tj,jk->tik", V, E, Vi)
            if np.isrealobj(M):
                out = out.real
    if out is None:
        out = np.stack([sla.expm(M * tk) for tk in ts])
    out[ts == 0.0] = np.eye(n)
    return out[0] if scalar else out


def least_squares_solve(A, b, rank_tol: float = 1e-10) -> np.ndarray:
    """Minimizer of ``||A x - b||_2`` for a full-column-rank ``A``.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    A = np.asarray(A)
    b = np.asarray(b)
    if A.ndim != 2:
        raise DimensionError("A must be 2-D")
    m, n = A.shape
    if m < n:
        raise DimensionError(f"underdetermined system ({m} rows < {n} columns)")
    if b.shape[0] != m:
        raise DimensionError(f"right-hand side has {b.shape[0]} rows, expected {m}")
    s = np.linalg.svd(A, compute_uv=False)
    if n and (s[0] == 0 or s[-1] < rank_tol * s[0]):
        raise RankDeficiencyError(
            f"rank-deficient least-squares matrix: sigma_min/sigma_max = "
            f"{(s[-1] / s[0]) if s[0] else 0.0:.3e}"
        )
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x


def realify(M, tol: float = 1e-9) -> np.ndarray:
    """Drop numerically-zero imaginary parts.

    Raises ConjugatePairingError when an imaginary entry exceeds ``tol``
    (relative to ``max(1, max|M|)``), which means eigenpairs were not
    closed under conjugation.
    """
    M = np.asarray(M)
    if not np.iscomplexobj(M):
        return M.astype(float)
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0)
    resid = float(np.max(np.abs(M.imag))) if M.size else 0.0
    if resid > tol * scale:
        raise ConjugatePairingError(f"imaginary residue {resid:.3e} exceeds tolerance {tol * scale:.3e}")
    return M.real.copy()


def induced_norm(M) -> float:
    """Induced 2-norm (largest singular value)."""
    M = np.asarray(M)
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def kalman_rank(A, B) -> int:
    """Rank of the controllability matrix ``[B, AB, ..., A^{n-1}B]``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks)))


def block_exp_offdiag(P, Q, R, t) -> np.ndarray:
    """``int_0^t e^{P (t-s)} Q e^{R s} ds`` via one augmented exponential.

    This is the top-right block of ``exp([[P, Q], [0, R]] t)``.
    """
    P = np.atleast_2d(P)
    R = np.atleast_2d(R)
    Q = np.asarray(Q, dtype=float).reshape(P.shape[0], R.shape[0])
    p, r = P.shape[0], R.shape[0]
    big = np.zeros((p + r, p + r))
    big[:p, :p] = P
    big[:p, p:] = Q
    big[p:, p:] = R
    E = sla.expm(big * t)
    return E[:p, p:]
