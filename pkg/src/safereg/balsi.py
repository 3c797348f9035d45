"""Batch least-squares identification of the delay ``D`` and input gain ``b``.

Fourier probes of the delay-line profile satisfy ``f_n(t) = D q_n(t)``:

    q_n(t) = -∫_0^1 sin(πnx) u(x,t) dx
    f_n(t) = πn ∫_0^t ∫_0^1 cos(πnx) u(x,s) dx ds

and the input channel satisfies ``f_b(t) = b q_b(t)`` with
``q_b(t) = ∫_0^t u(0,s) ds``. Window integrals ``F = ∫ f q``, ``Q = ∫ q^2``
pin each parameter to ``F / Q`` once ``Q`` is nonzero.

The discrete probe uses the summation-by-parts form of the cosine
integral, which makes ``f_n = D q_n`` hold to round-off for the upwind and
exact delay lines alike.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataInconsistencyError


@dataclass(frozen=True)
class TriggerSchedule:
    """Update instants ``t_i = t_0 + i T_a`` with a window of ``N_win`` periods."""

    T_a: float = 1.0
    N_win: int = 2
    t0: float = 0.0

    def __post_init__(self):
        if self.T_a <= 0 or self.N_win < 1:
            raise ConfigurationError("need T_a > 0 and window depth >= 1")

    def instant(self, i: int) -> float:
        return self.t0 + i * self.T_a

    def window_start(self, i_next: int) -> float:
        """Earliest trigger instant ``t_g >= t_{i+1} - N_win T_a`` (g <= i)."""
        t_next = self.instant(i_next)
        g = max(0, int(np.ceil((t_next - self.N_win * self.T_a - self.t0) / self.T_a - 1e-9)))
        return self.instant(g)

    def check_first_update(self, D_lower: float):
        if self.instant(1) < D_lower - 1e-12:
            raise ConfigurationError(
                f"first update at {self.instant(1)} precedes the lower delay bound {D_lower}"
            )


@dataclass
class Theta2Estimate:
    D_hat: float
    b_hat: float | None
    t_f: float | None = None
    trace: list = field(default_factory=list)  # (t_i, D_hat, b_hat, is_exact)


class ProbeBank:
    """Running probes, cumulative window integrals and trigger snapshots.

    Parameters
    ----------
    N : number of delay-line cells (grid has N+1 points)
    n_modes : number of sine modes
    n, n_v : plant and exosystem dimensions (input channel); ``n=0`` disables it
    X0 : initial plant state (for ``x_n(t) - x_n(0)``)
    """

    def __init__(self, N: int, n_modes: int = 5, n: int = 0, n_v: int = 0, X0=None):
        self.N, self.n_modes = N, n_modes
        x = np.linspace(0.0, 1.0, N + 1)
        modes = np.arange(1, n_modes + 1)[:, None]
        s = np.sin(np.pi * modes * x[None, :])
        s[:, 0] = 0.0
        s[:, -1] = 0.0
        self.dx = 1.0 / N
        self._sin = s
        self._ds = s[:, 1:] - s[:, :-1]  # weights on u_1..u_N
        self.f = np.zeros(n_modes)
        self.q = np.zeros(n_modes)
        self.cumF = np.zeros(n_modes)
        self.cumQ = np.zeros(n_modes)
        # input channel
        self.has_input = n > 0
        self.n, self.n_v = n, n_v
        self.X0 = None if X0 is None else np.asarray(X0, dtype=float).copy()
        self.qb = 0.0
        self.IX = np.zeros(n)
        self.IV = np.zeros(n_v)
        self.C_xq = 0.0
        self.C_IXq = np.zeros(n)
        self.C_IVq = np.zeros(n_v)
        self.C_qq = 0.0
        self.t = 0.0
        self.snapshots: dict[int, dict] = {}

    def sine_probe(self, profile) -> np.ndarray:
        """``q_n = -∫ sin(πnx) u dx`` by the composite trapezoid rule."""
        return -self.dx * (self._sin @ profile)

    def accumulate(self, profile, dt: float, X=None, V=None, X_next=None, V_next=None, u0_next=None):
        """Advance all running quantities over one step ``[t, t+dt)``.

        ``profile`` is the delay-line profile after the boundary update at
        ``t`` (so ``profile[0]`` is the input delivered over the step).
        ``X, V`` are the plant/exosystem states at ``t`` and ``X_next, V_next``
        at ``t + dt``; ``u0_next`` is the delivered input at ``t + dt``
        (trapezoid for ``q_b``; omitted means the input is held).
        """
        profile = np.asarray(profile, dtype=float)
        q = self.sine_probe(profile)
        self.q = q
        self.cumF += dt * self.f * q
        self.cumQ += dt * q * q
        self.f = self.f + dt * (self._ds @ profile[1:])
        if self.has_input:
            X = np.asarray(X, dtype=float)
            xn = X[-1] - self.X0[-1]
            qb = self.qb
            self.C_xq += dt * xn * qb
            self.C_IXq += dt * self.IX * qb
            self.C_IVq += dt * self.IV * qb
            self.C_qq += dt * qb * qb
            u_end = profile[0] if u0_next is None else u0_next
            self.qb = qb + 0.5 * dt * (profile[0] + u_end)
            self.IX = self.IX + 0.5 * dt * (X + np.asarray(X_next, dtype=float))
            self.IV = self.IV + 0.5 * dt * (np.asarray(V, dtype=float) + np.asarray(V_next, dtype=float))
        self.t += dt

    def f_b(self, X, a_row, g_row) -> float:
        """Current ``f_b = x_n - x_n(0) - a·∫X - g·∫V`` given identified rows."""
        return float(X[-1] - self.X0[-1] - a_row @ self.IX - g_row @ self.IV)

    def record_trigger(self, i: int):
        """Store cumulative integrals at trigger ``t_i``."""
        self.snapshots[i] = dict(
            cumF=self.cumF.copy(), cumQ=self.cumQ.copy(), C_xq=self.C_xq,
            C_IXq=self.C_IXq.copy(), C_IVq=self.C_IVq.copy(), C_qq=self.C_qq,
        )

    def window(self, g: int, i: int, a_row=None, g_row=None):
        """Window integrals between triggers ``g`` and ``i`` (``g < i``).

        Returns ``(F_n, Q_n, F_b, Q_b)``; the input-channel entries are None
        when the channel is disabled or ``a_row`` is not yet known.
        """
        s0, s1 = self.snapshots[g], self.snapshots[i]
        Fn = s1["cumF"] - s0["cumF"]
        Qn = s1["cumQ"] - s0["cumQ"]
        Fb = Qb = None
        if self.has_input and a_row is not None:
            Qb = s1["C_qq"] - s0["C_qq"]
            Fb = (s1["C_xq"] - s0["C_xq"]) - a_row @ (s1["C_IXq"] - s0["C_IXq"]) \
                - g_row @ (s1["C_IVq"] - s0["C_IVq"])
        return Fn, Qn, Fb, Qb


def _pin(F, Q, eps_Q, tol_consist, name):
    """Common value of ``F_k / Q_k`` over active constraints, or None."""
    F = np.atleast_1d(np.asarray(F, dtype=float))
    Q = np.atleast_1d(np.asarray(Q, dtype=float))
    act = Q > eps_Q
    if not np.any(act):
        return None
    vals = F[act] / Q[act]
    est = float(np.sum(F[act] * Q[act]) / np.sum(Q[act] ** 2))
    spread = float(np.max(np.abs(vals - est)))
    if spread > tol_consist * max(abs(est), 1e-12):
        raise DataInconsistencyError(
            f"{name}: active constraints disagree (values {vals}); quadrature or simulation fault"
        )
    return est


def batch_update(Fn, Qn, Fb, Qb, previous: Theta2Estimate, D_box, b_box=None, window_len: float = 1.0,
                 eps_Q_rel: float = 1e-8, tol_consist: float = 1e-6) -> Theta2Estimate:
    """One batch least-squares update from window integrals.

    Each parameter with informative data is pinned to ``F/Q`` and clamped
    to its box; otherwise the previous value is kept.
    """
    eps_Q = eps_Q_rel * window_len
    D_new = _pin(Fn, Qn, eps_Q, tol_consist, "delay")
    D_hat = previous.D_hat if D_new is None else float(np.clip(D_new, *D_box))
    b_hat = previous.b_hat
    if Fb is not None and Qb is not None and b_box is not None:
        b_new = _pin(Fb, Qb, eps_Q, tol_consist, "input gain")
        if b_new is not None:
            b_hat = float(np.clip(b_new, *b_box))
    return Theta2Estimate(D_hat, b_hat, previous.t_f, list(previous.trace))


def detect_tf(times, excitation, schedule: TriggerSchedule, t_end: float | None = None,
              eps_exc: float = 1e-9, t_min: float = 0.0):
    """First trigger instant preceded by a nonzero excitation sample.

    Parameters
    ----------
    times, excitation : logged time stamps and excitation magnitudes
        (``|u(0,t)|`` for full-state identification, ``max_x |u(x,t)|`` for
        the delay-only variant)
    t_min : earliest admissible trigger (the DMD switch time)
    """
    times = np.asarray(times, dtype=float)
    excitation = np.abs(np.asarray(excitation, dtype=float))
    hit = np.flatnonzero(excitation > eps_exc)
    if hit.size == 0:
        return None
    t_exc = times[hit[0]]
    i = 1
    horizon = times[-1] if t_end is None else t_end
    while True:
        ti = schedule.instant(i)
        if ti > horizon + 1e-12:
            return None
        if ti > t_exc + 1e-12 and ti >= t_min - 1e-12:
            return ti
        i += 1


def write_estimate_trace(path, trace):
    """CSV ``t_i,D_hat,b_hat,is_exact``."""
    with open(path, "w") as fh:
        fh.write("t_i,D_hat,b_hat,is_exact\n")
        for t, D, b, ex in trace:
            fh.write(f"{t:.6f},{D:.12g},{'' if b is None else f'{b:.12g}'},{int(bool(ex))}\n")
