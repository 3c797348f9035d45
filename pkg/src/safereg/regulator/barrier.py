"""Barrier functions, the high-order CBF chain and the rescue bump.

The chain is ``h_1 = h(z_1, t) + ς(t)``, ``h_{i+1} = (L + k_i) h_i`` with the
Lie operator ``L = Σ_{j<n} z_{j+1} ∂/∂z_j + ∂/∂t`` of the integrator chain.
The control drift is ``b f = (L + k_n) h_n`` with ``z_{n+1} := 0`` (the
input channel is handled separately). Because ``L`` is linear, every
``h_i`` is a combination of ``L^m h`` and ``ς^{(m)}``; ``L^m h`` is
generated symbolically once and lambdified.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
import sympy as sp

from ..errors import BoundaryCaseError, ConfigurationError, SignAmbiguityError


class BarrierSpec:
    """Barrier ``h(e, t)`` given as a sympy-parsable expression in ``e`` and ``t``.

    Parameters
    ----------
    expr : str, e.g. ``"e"``, ``"-e"``, ``"e + sin(t)"``
    order : highest chain order that will be requested (plant dimension)
    """

    def __init__(self, expr: str, order: int):
        self.expr_str = str(expr)
        self.order = int(order)
        e, t = sp.symbols("e t")
        try:
            h = sp.sympify(self.expr_str, locals={"e": e, "t": t})
        except (sp.SympifyError, TypeError) as exc:
            raise ConfigurationError(f"cannot parse barrier {expr!r}: {exc}") from exc
        extra = h.free_symbols - {e, t}
        if extra:
            raise ConfigurationError(f"barrier uses unknown symbols {sorted(map(str, extra))}")
        self._h_sym = h
        n = self.order
        z = sp.symbols(f"z1:{n + 2}")  # z1..z_{n+1}
        self._z = z
        hz = h.subs(e, z[0])
        L_terms = [hz]
        cur = hz
        for _ in range(n):
            nxt = sp.diff(cur, t)
            for j in range(n):  # z_{n+1} is set to 0 below
                nxt += sp.diff(cur, z[j]) * z[j + 1]
            cur = sp.expand(nxt.subs(z[n], 0))
            L_terms.append(cur)
        self._L_sym = L_terms
        args = list(z[:n]) + [t]
        self._L = [sp.lambdify(args, expr_, "numpy") for expr_ in L_terms]
        self._h = sp.lambdify((e, t), h, "numpy")
        self._theta = sp.lambdify((e, t), sp.diff(h, e), "numpy")
        self._dh_dt = sp.lambdify((e, t), sp.diff(h, t), "numpy")
        self._check_derivatives()

    def _check_derivatives(self):
        """Cross-check the symbolic partials against central differences."""
        rng = np.random.default_rng(0)
        for _ in range(3):
            ev, tv = rng.uniform(-2, 2), rng.uniform(0, 3)
            d = 1e-6
            fd_e = (self.h(ev + d, tv) - self.h(ev - d, tv)) / (2 * d)
            fd_t = (self.h(ev, tv + d) - self.h(ev, tv - d)) / (2 * d)
            scale = 1 + abs(fd_e) + abs(fd_t)
            if abs(fd_e - self.theta(ev, tv)) > 1e-5 * scale or abs(fd_t - self.dh_dt(ev, tv)) > 1e-5 * scale:
                raise ConfigurationError("barrier derivative cross-check failed")

    def __repr__(self):
        return f"BarrierSpec({self.expr_str!r}, order={self.order})"

    def h(self, e, t):
        return np.asarray(self._h(e, t), dtype=float) + 0 * np.asarray(e, dtype=float)

    def theta(self, e, t):
        """``ϑ = ∂h/∂e``."""
        return np.asarray(self._theta(e, t), dtype=float) + 0 * np.asarray(e, dtype=float) + 0 * np.asarray(t, dtype=float)

    def dh_dt(self, e, t):
        return np.asarray(self._dh_dt(e, t), dtype=float) + 0 * np.asarray(e, dtype=float)

    def theta0(self, e0: float) -> float:
        v = float(self.theta(e0, 0.0))
        if v == 0.0:
            raise ConfigurationError("barrier has zero sensitivity to e at t=0")
        return float(np.sign(v))

    def lie(self, m: int, Z, t):
        """``L^m h(z_1, t)`` evaluated at chain coordinates ``Z`` (shape (n, ...))."""
        Z = np.asarray(Z, dtype=float)
        args = [Z[j] for j in range(self.order)] + [np.asarray(t, dtype=float)]
        out = np.asarray(self._L[m](*args), dtype=float)
        return np.broadcast_to(out, np.broadcast(Z[0], np.asarray(t)).shape).astype(float)

    def lie_all(self, Z, t):
        """Stack of ``L^m h`` for ``m = 0..n``."""
        return np.stack([self.lie(m, Z, t) for m in range(self.order + 1)])


def _poly_from_gains(gains) -> np.ndarray:
    """Ascending coefficients of ``Π (x + k_l)``."""
    c = np.array([1.0])
    for k in gains:
        c = np.convolve(c, [k, 1.0])
    return c


def _safe_exp_r(r):
    out = np.zeros_like(r)
    ok = r > -700.0
    out[ok] = np.exp(r[ok])
    return out


@dataclass(frozen=True)
class RescueFunction:
    """``ς(t) = coef · exp(1/t̄² - 1/(t - c)²)`` on ``[0, c)``, zero afterwards.

    ``c`` is the recovery instant (delay bound plus ``t̄``).
    """

    coef: float
    t_bar: float
    c: float

    @property
    def active(self) -> bool:
        return self.coef != 0.0

    def derivs(self, t, order: int) -> np.ndarray:
        """``(ς, ς', ..., ς^{(order)})`` stacked on a leading axis."""
        t = np.asarray(t, dtype=float)
        shape = t.shape
        t = t.reshape(-1)
        out = np.zeros((order + 1, t.size))
        if not self.active:
            return out.reshape((order + 1,) + shape)
        mask = t < self.c
        if not np.any(mask):
            return out.reshape((order + 1,) + shape)
        s = t[mask] - self.c
        r = 1.0 / self.t_bar ** 2 - 1.0 / s ** 2
        g = [_safe_exp_r(r)]
        live = g[0] > 0
        rd = [None] + [-((-1.0) ** j) * factorial(j + 1) * s ** (-(j + 2)) for j in range(1, order + 1)]
        for m in range(1, order + 1):
            acc = np.zeros_like(s)
            for j in range(m):
                acc += comb(m - 1, j) * rd[j + 1] * g[m - 1 - j]
            g.append(np.where(live, acc, 0.0))
        for m in range(order + 1):
            out[m, mask] = self.coef * g[m]
        return out.reshape((order + 1,) + shape)


NO_RESCUE = RescueFunction(0.0, 1.0, 0.0)


def rescue_sigma(t, h_bounds, eps: float, t_bar: float, D_or_Dbar: float, order: int = 0,
                 conservative: bool = True):
    """Rescue bump and its derivatives.

    Parameters
    ----------
    h_bounds : float (exact ``h(e(D), D)``) or pair ``(h_lo, h_hi)``
    conservative : when the bounds straddle zero, treat the start as unsafe
        (otherwise raise SignAmbiguityError)

    Returns
    -------
    (order+1, ...) array ``(ς, ..., ς^{(order)})`` at ``t``.
    """
    return make_rescue(h_bounds, eps, t_bar, D_or_Dbar, conservative)[0].derivs(t, order)


def make_rescue(h_bounds, eps: float, t_bar: float, D_or_Dbar: float, conservative: bool = True):
    """Build the rescue function and return it with a verdict string.

    Verdicts: ``'safe'`` (lower bound positive, no rescue), ``'unsafe'``
    (upper bound nonpositive), ``'ambiguous'`` (straddles zero, rescue
    used conservatively).
    """
    if np.ndim(h_bounds) == 0:
        lo = hi = float(h_bounds)
    else:
        lo, hi = map(float, h_bounds)
    if lo > 0:
        return NO_RESCUE, "safe"
    if eps <= 0 or t_bar <= 0:
        raise ConfigurationError("rescue needs eps > 0 and t_bar > 0")
    if hi <= 0:
        verdict = "unsafe"
    elif conservative:
        verdict = "ambiguous"
    else:
        raise SignAmbiguityError(f"barrier bounds [{lo:.4g}, {hi:.4g}] straddle zero")
    return RescueFunction(-lo + eps, t_bar, D_or_Dbar + t_bar), verdict


@dataclass
class CBFChain:
    """Gains, barrier and rescue defining the chain ``h_1..h_n`` and the drift."""

    spec: BarrierSpec
    gains: np.ndarray
    rescue: RescueFunction = field(default=NO_RESCUE)

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float).reshape(-1)
        if len(self.gains) != self.spec.order:
            raise ConfigurationError("need one gain per chain level")
        if np.any(self.gains < 0):
            raise ConfigurationError("chain gains must be nonnegative")
        n = self.spec.order
        self._coefs = [_poly_from_gains(self.gains[:i]) for i in range(n + 1)]  # for h_{i+1}

    @property
    def n(self) -> int:
        return self.spec.order

    def _combine(self, coefs, lie, sig):
        out = np.zeros(lie.shape[1:])
        for m, c in enumerate(coefs):
            out = out + c * (lie[m] + sig[m])
        return out

    def values(self, Z, t) -> np.ndarray:
        """``(h_1, ..., h_n)`` at chain coordinates ``Z`` and time ``t``."""
        Z = np.asarray(Z, dtype=float)
        lie = self.spec.lie_all(Z, t)
        sig = self.rescue.derivs(np.broadcast_to(np.asarray(t, dtype=float), lie.shape[1:]), self.n)
        return np.stack([self._combine(self._coefs[i], lie, sig) for i in range(self.n)])

    def drift_times_b(self, Z, t) -> np.ndarray:
        """``b f = (L + k_n) h_n`` with ``z_{n+1} = 0``."""
        Z = np.asarray(Z, dtype=float)
        lie = self.spec.lie_all(Z, t)
        sig = self.rescue.derivs(np.broadcast_to(np.asarray(t, dtype=float), lie.shape[1:]), self.n)
        return self._combine(self._coefs[self.n], lie, sig)

    def gain_lower_bounds(self, Z, t) -> np.ndarray:
        """``k̂_i = -(L h_i) / h_i`` for ``i = 1..n-1`` at (Z, t).

        Evaluated sequentially with the configured lower gains. Raises
        BoundaryCaseError when some ``h_i`` vanishes.
        """
        Z = np.asarray(Z, dtype=float)
        lie = self.spec.lie_all(Z, t)
        sig = self.rescue.derivs(np.broadcast_to(np.asarray(t, dtype=float), lie.shape[1:]), self.n)
        out = []
        for i in range(1, self.n):
            c = self._coefs[i - 1]
            hi = self._combine(c, lie, sig)
            Lhi = self._combine(np.concatenate([[0.0], c]), lie, sig)
            if np.any(np.abs(hi) < 1e-9):
                raise BoundaryCaseError(f"h_{i} vanishes at the prediction horizon")
            out.append(-Lhi / hi)
        return np.array(out)


def cbf_chain(Z, t, chain: CBFChain, b: float):
    """Chain values ``H = (h_1..h_n)`` and drift ``f = (L + k_n) h_n / b``."""
    return chain.values(Z, t), chain.drift_times_b(Z, t) / b


def select_gains_from_samples(chain_proto: CBFChain, Zs, ts, margin: float = 0.1,
                              fixed=None) -> np.ndarray:
    """Smallest admissible gains over sample points, plus margin.

    Parameters
    ----------
    chain_proto : chain carrying barrier and rescue (its gains are ignored)
    Zs : (n, P) predicted chain coordinates at the horizon for every sample
    ts : (P,) horizon times
    fixed : optional gains to verify instead of choosing; returned unchanged
        if admissible, otherwise ConfigurationError

    The last gain only needs to be nonnegative; it is set to ``margin``
    unless fixed.
    """
    n = chain_proto.n
    gains = np.zeros(n)
    for i in range(1, n):
        trial = CBFChain(chain_proto.spec, np.where(np.arange(n) < i - 1, gains, 0.0), chain_proto.rescue)
        khat = trial.gain_lower_bounds(Zs, ts)[i - 1]
        need = max(0.0, float(np.max(khat)))
        if fixed is not None:
            if fixed[i - 1] < need:
                raise ConfigurationError(
                    f"gain k_{i}={fixed[i - 1]} below the admissible bound {need:.4g}"
                )
            gains[i - 1] = fixed[i - 1]
        else:
            gains[i - 1] = need + margin
    gains[n - 1] = fixed[n - 1] if fixed is not None else margin
    return gains
