"""Krylov/Hankel DMD identification of the extended matrix ``[[S_d, 0], [G P_d, A]]``.

Two variants: full-state snapshots of ``(V_d, X)`` and scalar output
snapshots of ``Y = x_1`` (companion-form plant and disturbance model).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AliasingError,
    ClassificationError,
    ConjugatePairingError,
    RankDeficiencyError,
    SimpleSpectrumError,
)
from .matkit import eig_simple, least_squares_solve, realify

RANK_TOL = 1e-11


@dataclass(frozen=True)
class HankelBlock:
    """Hankel matrix of snapshots 0..2ñ-2.

    For ``kind='full'`` block (i, j) is the snapshot column ``i + j`` so the
    matrix is ``(ñ·m) x ñ``; for ``kind='output'`` it is ``ñ x ñ`` scalars.
    """

    kind: str
    H: np.ndarray
    n_tilde: int
    singular_values: np.ndarray

    @property
    def rank_ratio(self) -> float:
        s = self.singular_values
        return float(s[-1] / s[0]) if s[0] > 0 else 0.0


@dataclass(frozen=True)
class CompanionFit:
    f: np.ndarray
    F: np.ndarray
    residual: float


@dataclass(frozen=True)
class KoopmanSpectrumResult:
    lambda_hat: np.ndarray
    lambda_tilde: np.ndarray
    modes: np.ndarray | None
    idx_d: np.ndarray
    idx_a: np.ndarray
    T_d: float


@dataclass(frozen=True)
class IdentifiedTheta1:
    A_hat: np.ndarray
    S_d_hat: np.ndarray
    G_bar_hat: np.ndarray | None = None
    switch_time: float | None = None
    A_tilde: np.ndarray | None = None
    eigenvalues: np.ndarray = field(default=None)
    diagnostics: dict = field(default=None)


def _as_snapshots(snapshots, kind):
    S = np.asarray(snapshots, dtype=float)
    if kind == "output":
        return S.reshape(1, -1)
    if S.ndim == 1:
        S = S.reshape(1, -1)
    return S


def build_hankel(snapshots, n_tilde: int, kind: str = "full", rank_tol: float = RANK_TOL) -> HankelBlock:
    """Hankel matrix from snapshot columns.

    Parameters
    ----------
    snapshots : (m, K) matrix, one snapshot per column (or 1-D for outputs), K >= 2ñ-1
    n_tilde : extended dimension ñ
    kind : 'full' or 'output'
    """
    if kind not in ("full", "output"):
        raise ValueError(f"unknown Hankel kind {kind!r}")
    S = _as_snapshots(snapshots, kind)
    m, K = S.shape
    if K < 2 * n_tilde - 1:
        raise ValueError(f"need {2 * n_tilde - 1} snapshots, got {K}")
    H = np.empty((n_tilde * m, n_tilde))
    for i in range(n_tilde):
        for j in range(n_tilde):
            H[i * m:(i + 1) * m, j] = S[:, i + j]
    s = np.linalg.svd(H, compute_uv=False)
    blk = HankelBlock(kind, H, n_tilde, s)
    if s[0] == 0 or s[n_tilde - 1] / s[0] < rank_tol:
        which = "state Hankel" if kind == "full" else "output Hankel"
        raise RankDeficiencyError(
            f"{which} has numerical rank below {n_tilde} (sigma_min/sigma_max = {blk.rank_ratio:.2e}); "
            "the snapshot data do not excite every mode of the extended system"
        )
    return blk


def fit_companion(H: HankelBlock, snapshots) -> CompanionFit:
    """Least-squares companion coefficients from the shifted snapshots.

    Solves ``H f = -col(X(ñ), ..., X(2ñ-1))``; ``F`` has ones on its
    subdiagonal and ``-f`` in its last column.
    """
    S = _as_snapshots(snapshots, H.kind)
    n = H.n_tilde
    if S.shape[1] < 2 * n:
        raise ValueError(f"need {2 * n} snapshots for the companion fit, got {S.shape[1]}")
    tail = S[:, n:2 * n].T.reshape(-1)  # col(X(ñ), ..., X(2ñ-1))
    f = -least_squares_solve(H.H, tail)
    F = np.zeros((n, n))
    F[np.arange(1, n), np.arange(n - 1)] = 1.0
    F[:, -1] = -f
    resid = float(np.linalg.norm(H.H @ f + tail))
    return CompanionFit(f, F, resid)


def shifted_hankel(snapshots, n_tilde: int, kind: str = "full") -> np.ndarray:
    """Hankel matrix of snapshots 1..2ñ-1 (the Koopman image of ``H``)."""
    S = _as_snapshots(snapshots, kind)
    m = S.shape[0]
    H = np.empty((n_tilde * m, n_tilde))
    for i in range(n_tilde):
        for j in range(n_tilde):
            H[i * m:(i + 1) * m, j] = S[:, i + j + 1]
    return H


def classify_axis(lam: np.ndarray, n_d: int, tol_rel: float = 1e-6):
    """Split continuous eigenvalues into disturbance (imaginary axis) and plant sets.

    Strictly imaginary nonzero eigenvalues are assigned to the disturbance
    class first. Remaining disturbance slots are filled with on-axis
    eigenvalues (zeros) only when that choice is unambiguous.
    """
    lam = np.asarray(lam)
    scale = max(float(np.max(np.abs(lam))) if lam.size else 0.0, 1.0)
    tol = tol_rel * scale
    on_axis = np.abs(lam.real) <= tol
    nonzero_imag = on_axis & (np.abs(lam.imag) > tol)
    zero_like = on_axis & ~nonzero_imag
    idx_d = list(np.flatnonzero(nonzero_imag))
    if len(idx_d) > n_d:
        raise ClassificationError(
            f"{len(idx_d)} strictly imaginary eigenvalues but only {n_d} disturbance slots"
        )
    missing = n_d - len(idx_d)
    zeros = list(np.flatnonzero(zero_like))
    if missing:
        if len(zeros) != missing:
            raise ClassificationError(
                f"cannot assign {missing} remaining disturbance eigenvalue(s) among "
                f"{len(zeros)} on-axis real candidate(s); split is ambiguous"
            )
        idx_d += zeros
    idx_a = [i for i in range(len(lam)) if i not in idx_d]
    return np.array(sorted(idx_d), dtype=int), np.array(idx_a, dtype=int)


def koopman_spectrum(fit: CompanionFit, H: HankelBlock, T_d: float, n_d: int,
                     alias_tol: float = 1e-6, tol_axis: float = 1e-6, gap_rel: float = 1e-6) -> KoopmanSpectrumResult:
    """Discrete and continuous eigenvalues of the companion matrix, plus modes.

    ``lambda_tilde = log(lambda_hat) / T_d`` on the principal branch.
    A double root of the companion polynomial splits by about the square
    root of machine precision, hence the default ``gap_rel``.
    """
    sp = eig_simple(fit.F, gap_rel)
    if not sp.simple:
        raise SimpleSpectrumError(
            f"companion matrix has repeated eigenvalues (gap {sp.min_gap:.2e}); "
            "the extended system must have a simple spectrum"
        )
    lam_hat = sp.eigenvalues
    if np.any(np.abs(lam_hat) == 0):
        raise SimpleSpectrumError("zero discrete eigenvalue: logarithm undefined")
    ang = np.angle(lam_hat)
    if np.any(np.abs(ang) >= np.pi - alias_tol):
        raise AliasingError(
            "discrete eigenvalue on the negative real axis; sampling period too long for the "
            "principal logarithm (reduce T_d)"
        )
    lam = np.log(lam_hat) / T_d
    modes = None
    if H.kind == "full":
        m = H.H.shape[0] // H.n_tilde
        modes = (H.H @ sp.vectors)[:m, :]
    idx_d, idx_a = classify_axis(lam, n_d, tol_axis)
    return KoopmanSpectrumResult(lam_hat, lam, modes, idx_d, idx_a, T_d)


def _order(lam: np.ndarray) -> np.ndarray:
    return np.lexsort((lam.imag, lam.real))


def reconstruct_theta1_full(spec: KoopmanSpectrumResult, n_d: int, tol: float = 1e-7,
                            switch_time: float | None = None) -> IdentifiedTheta1:
    """Rebuild ``Ã = V Λ V^{-1}`` from the modes and partition it.

    The state ordering is ``(V_d, X)``; returns ``S_d`` (top-left), ``A``
    (bottom-right) and the disturbance block ``G P_d`` (bottom-left).
    """
    V = spec.modes
    lam = spec.lambda_tilde
    if V is None:
        raise ValueError("full-state reconstruction needs modes")
    if np.linalg.cond(V) > 1e12:
        raise RankDeficiencyError("mode matrix is singular")
    At = realify(V @ np.diag(lam) @ np.linalg.inv(V), tol)
    S_d = At[:n_d, :n_d]
    A = At[n_d:, n_d:]
    GPd = At[n_d:, :n_d]
    return IdentifiedTheta1(A, S_d, GPd, switch_time, At, lam)


def vandermonde(lam) -> np.ndarray:
    """Rows ``(1, λ_i, ..., λ_i^{n-1})`` transposed: column i is the eigenvector of
    the companion matrix with unit superdiagonal."""
    lam = np.asarray(lam)
    n = len(lam)
    return np.vander(lam, n, increasing=True).T


def companion_from_roots(lam) -> np.ndarray:
    """Companion matrix (unit superdiagonal, coefficients in the last row)."""
    lam = np.asarray(lam)
    n = len(lam)
    M = np.zeros((n, n))
    if n == 0:
        return M
    c = np.real_if_close(np.poly(lam), tol=1e6)
    if np.iscomplexobj(c):
        raise ConjugatePairingError("characteristic polynomial has complex coefficients")
    M[np.arange(n - 1), np.arange(1, n)] = 1.0
    M[-1, :] = -c[::-1][:-1]
    return M


def reconstruct_theta1_output(spec: KoopmanSpectrumResult, n: int, n_d: int, tol: float = 1e-7,
                              switch_time: float | None = None) -> IdentifiedTheta1:
    """Companion-form ``A`` and ``S_d`` from the classified eigenvalues.

    Uses the Vandermonde similarity ``V Λ V^{-1}`` and cross-checks it
    against the characteristic-polynomial coefficients.
    """
    lam = spec.lambda_tilde
    la, ld = lam[spec.idx_a], lam[spec.idx_d]
    if len(la) != n or len(ld) != n_d:
        raise ValueError("classification sizes do not match (n, n_d)")
    out = []
    for part in (la, ld):
        if len(part) == 0:
            out.append(np.zeros((0, 0)))
            continue
        Vm = vandermonde(part)
        if np.linalg.cond(Vm) > 1e12:
            raise SimpleSpectrumError("Vandermonde matrix singular: repeated eigenvalues")
        M = realify(Vm @ np.diag(part) @ np.linalg.inv(Vm), tol)
        ref = companion_from_roots(part)
        if np.max(np.abs(M - ref)) > 1e-6 * max(1.0, np.max(np.abs(ref))):
            raise ConjugatePairingError("Vandermonde reconstruction disagrees with polynomial coefficients")
        out.append(M)
    return IdentifiedTheta1(out[0], out[1], None, switch_time, None, lam)


def _diagnostics(H: HankelBlock, fit: CompanionFit) -> dict:
    return {"hankel_singular_values": H.singular_values.tolist(), "hankel_rank_ratio": H.rank_ratio,
            "companion_residual": fit.residual}


def identify_full(snapshots, n: int, n_d: int, T_d: float, switch_time=None) -> IdentifiedTheta1:
    """Hankel -> companion fit -> spectrum -> ``(A, S_d, G P_d)`` for state snapshots."""
    nt = n + n_d
    H = build_hankel(snapshots, nt, "full")
    fit = fit_companion(H, snapshots)
    spec = koopman_spectrum(fit, H, T_d, n_d)
    res = reconstruct_theta1_full(spec, n_d, switch_time=switch_time)
    return replace(res, diagnostics=_diagnostics(H, fit))


def identify_output(snapshots, n: int, n_d: int, T_d: float, switch_time=None) -> IdentifiedTheta1:
    """Same pipeline from scalar output snapshots (companion-form model)."""
    nt = n + n_d
    H = build_hankel(snapshots, nt, "output")
    fit = fit_companion(H, snapshots)
    spec = koopman_spectrum(fit, H, T_d, n_d)
    res = reconstruct_theta1_output(spec, n, n_d, switch_time=switch_time)
    return replace(res, diagnostics=_diagnostics(H, fit))


def extended_matrix(A, S_d, GPd) -> np.ndarray:
    """``[[S_d, 0], [G P_d, A]]`` acting on ``(V_d, X)``."""
    A = np.atleast_2d(A)
    S_d = np.atleast_2d(S_d) if np.size(S_d) else np.zeros((0, 0))
    n, nd = A.shape[0], S_d.shape[0]
    M = np.zeros((n + nd, n + nd))
    M[:nd, :nd] = S_d
    M[nd:, :nd] = np.asarray(GPd).reshape(n, nd)
    M[nd:, nd:] = A
    return M


def eigenfunctions(A_tilde) -> tuple[np.ndarray, np.ndarray]:
    """Koopman eigenfunction weights (left eigenvectors) of a reconstructed ``Ã``.

    Returns eigenvalues and a matrix whose rows ``w_i`` satisfy
    ``w_i Ã = λ_i w_i``; ``φ_i(X) = w_i · X``. Test helper only.
    """
    sp = eig_simple(A_tilde)
    W = np.linalg.inv(sp.vectors)
    return sp.eigenvalues, W


@dataclass(frozen=True)
class ValidationItem:
    name: str
    passed: bool
    detail: str


def validate_scenario(sys, exo, T_d: float) -> list[ValidationItem]:
    """Check the identification hypotheses on a ground-truth scenario.

    Items: bordered rank condition for each disturbance eigenvalue, simple
    extended spectrum, and no aliasing of discrete eigenvalues.
    """
    A, C = sys.A, sys.C
    GPd = sys.G @ exo.P_d
    n = sys.n
    items = []
    ev_d = np.linalg.eigvals(exo.S_d) if exo.n_d else np.array([])
    for lam in ev_d:
        top = np.hstack([A - lam * np.eye(n), GPd])
        bot = np.hstack([C.reshape(1, -1), np.zeros((1, exo.n_d))])
        Mb = np.vstack([top, bot])
        r = np.linalg.matrix_rank(Mb, tol=1e-9 * max(1.0, np.abs(Mb).max()))
        items.append(ValidationItem(
            f"bordered rank at lambda={lam:.6g}", r == n + 1, f"rank {r}, required {n + 1}"))
    At = extended_matrix(A, exo.S_d, GPd)
    sp = eig_simple(At)
    items.append(ValidationItem("simple extended spectrum", bool(sp.simple),
                                f"min eigenvalue gap {sp.min_gap:.3e}"))
    z = np.exp(sp.eigenvalues * T_d)
    d = np.abs(z[:, None] - z[None, :])
    d[np.diag_indices(len(z))] = np.inf
    worst = float(d.min()) if len(z) > 1 else np.inf
    bad = ""
    if worst < 1e-8:
        i, j = np.unravel_index(np.argmin(d), d.shape)
        bad = f"; exp(lambda T_d) collide for {sp.eigenvalues[i]:.6g} and {sp.eigenvalues[j]:.6g}"
    items.append(ValidationItem("distinct discrete eigenvalues", worst >= 1e-8,
                                f"min |exp(l_i T_d) - exp(l_j T_d)| = {worst:.3e}{bad}"))
    return items


def write_snapshots(path, snapshots, T_d: float, names=None) -> None:
    """CSV with header ``k,t,<components>``, one snapshot per row."""
    S = np.asarray(snapshots, dtype=float)
    if S.ndim == 1:
        S = S.reshape(1, -1)
    m, count = S.shape
    names = list(names) if names is not None else (["y"] if m == 1 else [f"z{i + 1}" for i in range(m)])
    if len(names) != m:
        raise ValueError(f"{len(names)} component names for {m} components")
    k = np.arange(count)
    rows = np.column_stack([k, k * T_d, S.T])
    np.savetxt(path, rows, delimiter=",", header=",".join(["k", "t"] + names), comments="", fmt="%.17g")


def read_snapshots(path):
    """Inverse of :func:`write_snapshots`: ``(T_d, names, (m, count) snapshots)``.

    Rows must be consecutive (``k = 0, 1, ...``) and equally spaced in ``t``.
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header[:2] != ["k", "t"] or len(header) < 3:
        raise ValueError("snapshot CSV header must start with 'k,t' followed by component names")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"snapshot rows have {data.shape[1]} fields, header has {len(header)}")
    k, t = data[:, 0], data[:, 1]
    if not np.array_equal(k, np.arange(len(k))):
        raise ValueError("snapshot index column must be 0, 1, 2, ...")
    if len(t) < 2:
        raise ValueError("need at least two snapshots")
    steps = np.diff(t)
    T_d = float(steps.mean())
    if np.max(np.abs(steps - T_d)) > 1e-9 * max(1.0, T_d):
        raise ValueError("snapshots are not equally spaced in time")
    return T_d, header[2:], data[:, 2:].T.copy()
