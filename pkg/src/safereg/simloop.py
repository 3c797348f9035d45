"""Closed-loop orchestration on a shared clock, vehicle scenarios and run metrics.

Timeline of a data-driven run:

* ``[0, D̲)``: robust control over the full parameter grid while snapshots
  of the autonomous extended system are collected;
* ``t = D̲``: DMD identification installs ``Θ̂₁``;
* ``[D̲, t_f)``: robust control over the delay/gain grid with ``Θ̂₁``
  pinned; probe integrals accumulate and batch updates run at ``t_i``;
* ``t ≥ t_f``: data-driven controller with ``Θ̂ = (Θ̂₁, D̂, b̂)`` (plus the
  observer-error compensation in output-feedback mode).
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib.resources import files
from pathlib import Path

import numpy as np

from .balsi import ProbeBank, Theta2Estimate, TriggerSchedule, batch_update
from .dmd import identify_full, identify_output
from .errors import ConfigurationError, SaferegError
from .observer import (ControlHistory, ErrorEnvelope, GainSchedule, ObserverState, design_gains, error_matrix,
                       exp_bound, midpoint_value, mismatch_bounds, observer_step, worst_case_pre_pair)
from .plant import Exosystem, StrictFeedbackSystem, TruthStepper, initial_state, sample_snapshots
from .regulator.barrier import NO_RESCUE, BarrierSpec, CBFChain, make_rescue
from .regulator.control import (ControlBank, UncertaintyBoxes, bank_over, estimate_xi_e, h_eD_bounds,
                                gain_requirements, make_theta, output_control, rho_hat_gain, robust_control, select_gains)

SCHEMA_VERSION = 1
MODES = ("full-state", "output-feedback", "nominal")
REGULATION_HORIZON = 30.0  # |e| <= 1e-2 is checked only for runs at least this long


@dataclass
class ScenarioConfig:
    """Complete, JSON-serializable description of one closed-loop run.

    Matrices are row-major nested lists. Uncertain entries are listed in
    ``uncertain`` as ``[target, i, j, lo, hi]`` with target ``"A"``,
    ``"S_d"`` or ``"GPd"``; all other entries of the nominal matrices
    ``A_nom``, ``S_d_nom`` are treated as known.
    """

    name: str = "custom"
    mode: str = "full-state"
    # ground truth
    A: list = None
    b: float = 1.0
    G: list = None
    D: float = 1.0
    S_d: list = None
    P_d: list = None
    S_r: list = None
    P_r: list = None
    X0: list = None
    V_d0: list = None
    V_r0: list = None
    # uncertainty
    A_nom: list = None
    S_d_nom: list = None
    uncertain: list = field(default_factory=list)
    D_box: list = field(default_factory=lambda: [1.0, 3.0])
    b_box: list | None = None
    state_lo: list | None = None
    state_hi: list | None = None
    grid: int = 5
    D0: float | None = None
    b0: float | None = None
    # safety design
    barrier: str = "e"
    gains: list | None = None
    gain_margin: float = 0.1
    eps: float = 5.0
    t_bar: float = 1.5
    # identification
    T_a: float = 1.0
    N_win: int = 2
    T_d: float = 0.142
    n_modes: int = 5
    # observer
    X_hat0: list | None = None
    V_hat0: list | None = None
    L_v0: list | None = None
    L_x0: list | None = None
    L_v: list | None = None
    L_x: list | None = None
    target_spectrum: list | None = None
    xi_e: float | str | None = "estimate"
    # numerics
    dt: float = 1e-3
    delay_mode: str = "exact"
    N_cells: int = 100
    T_end: float = 30.0

    # -- derived objects ---------------------------------------------------
    def system(self) -> StrictFeedbackSystem:
        return StrictFeedbackSystem(np.array(self.A, dtype=float), self.b, np.array(self.G, dtype=float), self.D)

    def exosystem(self) -> Exosystem:
        return Exosystem(np.array(self.S_d, dtype=float), np.array(self.P_d, dtype=float),
                         np.array(self.S_r, dtype=float), np.array(self.P_r, dtype=float))

    def boxes(self) -> UncertaintyBoxes:
        GPd = np.array(self.G, dtype=float) @ np.array(self.P_d, dtype=float)
        return UncertaintyBoxes(
            np.array(self.A_nom if self.A_nom is not None else self.A, dtype=float),
            np.array(self.S_d_nom if self.S_d_nom is not None else self.S_d, dtype=float),
            GPd, [tuple(u) for u in self.uncertain], tuple(self.D_box),
            None if self.b_box is None else tuple(self.b_box),
            self.b if self.b_box is None else None,
            None if self.state_lo is None else np.array(self.state_lo, dtype=float),
            None if self.state_hi is None else np.array(self.state_hi, dtype=float),
            self.grid, self.D0, self.b0,
        )

    @property
    def n_tilde(self) -> int:
        return len(self.A) + len(self.S_d)

    def validate(self):
        """Raise ConfigurationError describing every problem found."""
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        for key in ("A", "G", "S_d", "P_d", "S_r", "P_r", "X0", "V_d0", "V_r0"):
            if getattr(self, key) is None:
                problems.append(f"missing {key}")
        if problems:
            raise ConfigurationError("; ".join(problems))
        try:
            self.system()
            self.exosystem()
            boxes = self.boxes()
        except SaferegError as exc:
            raise ConfigurationError(str(exc)) from exc
        state0 = np.concatenate([np.ravel(self.V_d0), np.ravel(self.X0)]) if self.mode == "output-feedback" else None
        GPd = np.array(self.G, dtype=float) @ np.array(self.P_d, dtype=float)
        if self.mode != "nominal":
            problems += boxes.violations(np.array(self.A, dtype=float), np.array(self.S_d, dtype=float), GPd,
                                         self.b, self.D, state0)
        if self.mode == "output-feedback" and self.state_lo is None:
            problems.append("output-feedback mode needs state_lo/state_hi")
        span = self.T_d * (2 * self.n_tilde - 1)
        if self.mode != "nominal" and span > boxes.D_box[0] * (1 + 1e-12):
            problems.append(f"snapshot span T_d(2n-1) = {span:.6g} exceeds the lower delay bound {boxes.D_box[0]}")
        if self.delay_mode == "upwind" and self.dt > self.D / self.N_cells * (1 + 1e-12):
            problems.append(f"dt = {self.dt} exceeds D dx = {self.D / self.N_cells}")
        if self.dt <= 0 or self.T_end <= 0:
            problems.append("dt and T_end must be positive")
        if abs(self.T_a / self.dt - round(self.T_a / self.dt)) > 1e-9:
            problems.append("trigger period T_a must be a multiple of dt")
        if self.mode != "nominal" and abs(boxes.D_box[0] / self.dt - round(boxes.D_box[0] / self.dt)) > 1e-9:
            problems.append("lower delay bound must be a multiple of dt")
        if problems:
            raise ConfigurationError("; ".join(problems))
        return boxes

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        d.update(asdict(self))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        ver = d.pop("schema_version", None)
        if ver != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {ver!r} (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, overrides: dict) -> "ScenarioConfig":
        d = self.to_dict()
        for k, v in overrides.items():
            if k not in d or k == "schema_version":
                raise ConfigurationError(f"override key {k!r} does not exist")
            d[k] = v
        return ScenarioConfig.from_dict(d)


def build_vehicle_scenario(vehicle: str, case: int) -> ScenarioConfig:
    """Longitudinal platoon follower ``E1`` (full state) or ``E2`` (output feedback).

    States are position and speed, ``b = 1/M``, the reference is the leader
    trajectory ``4t - cos t + 11`` shifted by ``± s_o``.
    """
    vehicle = vehicle.upper()
    if vehicle not in ("E1", "E2") or case not in (1, 2):
        raise ConfigurationError(f"unknown vehicle scenario {vehicle} case {case}")
    beta = -0.25
    common = dict(
        G=[[1.0, 1.0], [0.0, 1.0]], S_d=[[0.0, 1.0], [beta, 0.0]], P_d=[[1.0, 0.0], [0.0, 1.0]],
        S_r=[[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, -1.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]],
        P_r=[1.0, 0.0, 0.0, 0.0], V_d0=[1.0, 0.0], D_box=[1.0, 3.0],
        S_d_nom=[[0.0, 1.0], [-0.5, 0.0]], gains=[3.0, 1.0], eps=5.0, t_bar=1.5, T_a=1.0, N_win=2,
        T_d=0.142, dt=1e-3, T_end=30.0, delay_mode="exact",
    )
    if vehicle == "E1":
        s_o = 0.5 if case == 1 else 12.0
        a = -1.0
        return ScenarioConfig(
            name=f"vehicle_e1_case{case}", mode="full-state", A=[[0.0, 1.0], [0.0, a]], b=0.2, D=1.5,
            X0=[17.0, 5.0], V_r0=[10.0 + s_o, 4.0, 1.0, 4.0], A_nom=[[0.0, 1.0], [0.0, -1.0]],
            uncertain=[["A", 1, 1, -2.0, 0.0], ["S_d", 1, 0, -1.0, 0.0]], b_box=[0.1, 1.0],
            barrier="e", **common,
        )
    s_o = 0.5 if case == 1 else 8.0
    a = -1.25
    return ScenarioConfig(
        name=f"vehicle_e2_case{case}", mode="output-feedback", A=[[0.0, 1.0], [0.0, a]], b=0.25, D=1.2,
        X0=[5.0, 5.0], V_r0=[10.0 - s_o, 4.0, 1.0, 4.0], A_nom=[[0.0, 1.0], [0.0, -1.0]],
        uncertain=[["A", 1, 1, -2.0, 0.0], ["S_d", 1, 0, -1.0, 0.0]], b_box=None,
        state_lo=[-2.0, -2.0, 5.0, 2.0], state_hi=[2.0, 2.0, 5.0, 6.0],
        X_hat0=[5.0, 2.0], V_hat0=[0.0, 0.0], L_v0=[0.0, 0.0], L_x0=[0.0, 0.0],
        L_v=[-0.6, 15.0], L_x=[9.0, 10.0], xi_e="estimate", barrier="-e", **common,
    )


BUILTIN_SCENARIOS = {
    f"vehicle_e{v}_case{c}": (f"E{v}", c) for v in (1, 2) for c in (1, 2)
}


def builtin_scenario(name: str) -> ScenarioConfig:
    """Shipped scenario file ``scenarios/<name>.json`` (dumped from :func:`build_vehicle_scenario`)."""
    if name not in BUILTIN_SCENARIOS:
        raise ConfigurationError(f"unknown built-in scenario {name!r}")
    res = files("safereg").joinpath("scenarios", f"{name}.json")
    if not res.is_file():
        return build_vehicle_scenario(*BUILTIN_SCENARIOS[name])
    return ScenarioConfig.from_dict(json.loads(res.read_text()))


def load_scenario(ref) -> ScenarioConfig:
    """Scenario from a built-in name, a JSON file path, or a dict."""
    if isinstance(ref, dict):
        return ScenarioConfig.from_dict(ref)
    if isinstance(ref, str) and ref in BUILTIN_SCENARIOS:
        return builtin_scenario(ref)
    path = Path(ref)
    if not path.is_file():
        raise ConfigurationError(f"scenario {str(ref)!r} is neither a built-in name nor a readable file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"scenario file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"scenario file {path} must hold a JSON object")
    return ScenarioConfig.from_dict(data)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


class RunAborted(SaferegError):
    """A module error stopped the run; ``events`` holds the log up to the failure."""

    def __init__(self, cause: Exception, events: list, t: float):
        super().__init__(f"run aborted at t = {t:.4f}: {type(cause).__name__}: {cause}")
        self.cause = cause
        self.events = events
        self.t = t


@dataclass
class RunResult:
    config: ScenarioConfig
    columns: list
    series: np.ndarray  # (K+1, len(columns))
    events: list
    info: dict
    metrics: dict = field(default_factory=dict)

    def col(self, name: str) -> np.ndarray:
        return self.series[:, self.columns.index(name)]

    def write(self, outdir):
        """Write ``series.csv``, ``events.json`` and ``metrics.json``."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "series.csv", self.series, delimiter=",", header=",".join(self.columns),
                   comments="", fmt="%.10g")
        (out / "events.json").write_text(json.dumps(self.events, indent=2) + "\n")
        (out / "metrics.json").write_text(json.dumps(self.metrics, indent=2) + "\n")


def _phase_name(p: int) -> str:
    return {0: "robust-full-grid", 1: "robust-pinned-theta1", 2: "data-driven", 3: "nominal"}[p]


def run_closed_loop(cfg: ScenarioConfig, T_end: float | None = None) -> RunResult:
    """Execute the phase machine for one scenario and return all series."""
    boxes = cfg.validate()
    sys, exo = cfg.system(), cfg.exosystem()
    n, nd, nr = sys.n, exo.n_d, exo.n_r
    nv = nd + nr
    dt = cfg.dt
    T_end = cfg.T_end if T_end is None else T_end
    K = int(round(T_end / dt))
    output = cfg.mode == "output-feedback"
    nominal = cfg.mode == "nominal"
    S_r, P_r = np.array(cfg.S_r, dtype=float), np.array(cfg.P_r, dtype=float)
    GPd_true = sys.G @ exo.P_d
    D_lo, D_hi = boxes.D_box
    events: list = []

    def log(t, kind, **kw):
        ev = {"t": round(float(t), 9), "event": kind}
        ev.update(kw)
        events.append(ev)

    state = initial_state(sys, exo, cfg.X0, cfg.V_d0, cfg.V_r0, dt, cfg.delay_mode, cfg.N_cells)
    N = state.line.N
    stepper = TruthStepper(sys, exo, dt)
    spec = BarrierSpec(cfg.barrier, n)
    truth_theta = make_theta(sys.A, exo.S_d, GPd_true, S_r, P_r, sys.b, sys.D)

    # initial-state samples for the barrier bound and gain rule
    V_r0 = np.asarray(cfg.V_r0, dtype=float)
    if output:
        Zg = boxes.state_grid()
        X_s = Zg[:, nd:]
        V_s = np.hstack([Zg[:, :nd], np.tile(V_r0, (len(Zg), 1))])
    else:
        X_s = state.X[None, :]
        V_s = state.V[None, :]

    proto = CBFChain(spec, np.zeros(n), NO_RESCUE)
    try:
        if nominal:
            bank0 = ControlBank([truth_theta], proto, N)
            D_rescue = sys.D
        else:
            bank0 = bank_over(boxes, S_r, P_r, proto, N)
            D_rescue = D_hi
        h_lo, h_hi, _ = h_eD_bounds(bank0, X_s, V_s)
        rescue, verdict = make_rescue((h_lo, h_hi), cfg.eps, cfg.t_bar, D_rescue, conservative=True)
        if cfg.gains is None:
            bank0.chain = CBFChain(spec, np.zeros(n), rescue)
            gains = select_gains(bank0, X_s, V_s, cfg.gain_margin)
            gain_req, gain_rule_ok = gains - cfg.gain_margin, True
        else:
            gains = np.asarray(cfg.gains, dtype=float)
            bank0.chain = CBFChain(spec, gains, rescue)
            gain_req = gain_requirements(bank0, X_s, V_s)
            gain_rule_ok = bool(np.all(gains >= gain_req))
    except SaferegError as exc:
        raise RunAborted(exc, events, 0.0) from exc
    chain = CBFChain(spec, gains, rescue)
    bank0.chain = chain
    e0 = float(state.X[0] - P_r @ state.V_r)
    theta0 = spec.theta0(e0)
    log(0.0, "start", mode=cfg.mode, h_lo=h_lo, h_hi=h_hi, verdict=verdict, gains=list(map(float, gains)),
        rescue_coef=rescue.coef, theta0=theta0, gain_requirements=gain_req.tolist(), gain_rule_ok=gain_rule_ok)

    # identification state
    A_hat, S_hat, GPd_hat = boxes.initial_theta1()
    est = Theta2Estimate(boxes.D0, boxes.b0)
    D_pinned = False
    b_pinned = boxes.b_box is None
    dmd_done = False
    t_f = None
    bank1 = None
    bank_d = None
    schedule = TriggerSchedule(cfg.T_a, cfg.N_win)
    k_Ta = int(round(cfg.T_a / dt))
    k_Dlo = int(round(D_lo / dt))
    probes = ProbeBank(N, cfg.n_modes, 0 if boxes.b_box is None else n, nv, state.X)
    probes.record_trigger(0)
    rho_gain = None

    # observer
    C = np.zeros(n)
    C[0] = 1.0
    if output:
        obs = ObserverState(np.array(cfg.X_hat0, dtype=float), np.array(cfg.V_hat0, dtype=float))
        L_v0 = np.zeros(nd) if cfg.L_v0 is None else np.array(cfg.L_v0, dtype=float)
        L_x0 = np.zeros(n) if cfg.L_x0 is None else np.array(cfg.L_x0, dtype=float)
        grid1 = boxes.theta1_grid()
        pre_pair = worst_case_pre_pair(grid1, C, L_v0, L_x0, D_lo)
        dA, dS = mismatch_bounds(grid1, A_hat, S_hat)
        b_bound = boxes.b_known if boxes.b_box is None else boxes.b_box[1]
        env = ErrorEnvelope(boxes.M0, pre_pair, None, dA, dS, b_bound, D_lo, dt)
        gain_sched = GainSchedule(L_v0, L_x0, L_v0, L_x0, D_lo)
        log(0.0, "observer-envelope", M0=boxes.M0, Mbar_L0=pre_pair[0], delta_bar_L0=pre_pair[1],
            delta_A=dA, delta_S=dS)
    hist = ControlHistory(dt, K + 2)

    # output columns
    cols = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"vd{i + 1}" for i in range(nd)]
            + [f"vr{i + 1}" for i in range(nr)] + ["u0", "U", "Y", "r", "e", "h", "h1", "phase",
                                                     "D_hat", "b_hat", "a_err", "Sd_err", "D_err", "b_err"])
    if output:
        cols += [f"xhat{i + 1}" for i in range(n)] + [f"vdhat{i + 1}" for i in range(nd)] \
            + ["eo_norm", "rho", "rho_hat"]
    ci = {c: i for i, c in enumerate(cols)}
    out = np.zeros((K + 1, len(cols)))
    Y_hist = np.zeros(K + 2)
    Y_hist[0] = state.X[0]
    traj = np.zeros((K + 1, nd + n))  # (V_d, X) for full-state snapshots

    b_true = sys.b
    for k in range(K + 1):
        t = k * dt
        X, V = state.X, state.V
        traj[k, :nd], traj[k, nd:] = state.V_d, X
        try:
            # ---- events at t ----
            if not nominal and not dmd_done and k == k_Dlo:
                ts = np.arange(k + 1) * dt
                count = 2 * cfg.n_tilde
                if output:
                    snaps = sample_snapshots(ts, Y_hist[:k + 1], cfg.T_d, count, window=D_lo)
                    ident = identify_output(snaps, n, nd, cfg.T_d, switch_time=t)
                    A_hat, S_hat = ident.A_hat, ident.S_d_hat
                else:
                    snaps = sample_snapshots(ts, traj[:k + 1], cfg.T_d, count, window=D_lo)
                    ident = identify_full(snaps, n, nd, cfg.T_d, switch_time=t)
                    A_hat, S_hat, GPd_hat = ident.A_hat, ident.S_d_hat, ident.G_bar_hat
                dmd_done = True
                raw_dev = float(max(np.max(np.abs(A_hat - sys.A)), np.max(np.abs(S_hat - exo.S_d))))
                A_hat, S_hat, GPd_hat = boxes.project_known(A_hat, S_hat, GPd_hat)
                issues = boxes.violations(A_hat, S_hat, GPd_hat, boxes.b0, boxes.D0, tol=1e-8)
                log(t, "dmd-identified", A_hat=A_hat.tolist(), S_d_hat=S_hat.tolist(),
                    GPd_hat=np.asarray(GPd_hat).tolist(), eigenvalues=[str(z) for z in ident.eigenvalues],
                    raw_max_deviation=raw_dev, outside_boxes=issues)
                bank1 = bank_over(boxes, S_r, P_r, chain, N, theta1=(A_hat, S_hat, GPd_hat))
                if output:
                    if cfg.L_v is not None and cfg.L_x is not None:
                        L_v, L_x = np.array(cfg.L_v, dtype=float), np.array(cfg.L_x, dtype=float)
                    else:
                        des = design_gains(A_hat, S_hat, GPd_hat, C, cfg.target_spectrum)
                        L_v, L_x = des.L_v, des.L_x
                    gain_sched = GainSchedule(L_v0, L_x0, L_v, L_x, D_lo)
                    Lcal = error_matrix(S_hat, GPd_hat, A_hat, C, L_v, L_x)
                    env.post = exp_bound(Lcal)
                    if env.post.delta <= 0:
                        raise ConfigurationError("designed observer error matrix is not Hurwitz")
                    log(t, "observer-gains", L_v=L_v.tolist(), L_x=L_x.tolist(), delta_L=env.post.delta,
                        kappa_L=env.post.kappa)
            if not nominal and k > 0 and k % k_Ta == 0:
                i = k // k_Ta
                probes.record_trigger(i)
                if t_f is None:
                    g = int(round((schedule.window_start(i) - schedule.t0) / cfg.T_a))
                    a_row = A_hat[-1] if dmd_done else None
                    g_row = truth_like_gbar(GPd_hat, nr)[-1] if dmd_done else None
                    Fn, Qn, Fb, Qb = probes.window(g, i, a_row, g_row)
                    wl = (i - g) * cfg.T_a
                    est = batch_update(Fn, Qn, Fb, Qb, est, boxes.D_box, boxes.b_box, wl)
                    D_pinned = D_pinned or bool(np.any(Qn > 1e-8 * wl))
                    if Qb is not None and boxes.b_box is not None:
                        b_pinned = b_pinned or bool(Qb > 1e-8 * wl)
                    exact = dmd_done and D_pinned and b_pinned
                    est.trace.append((t, est.D_hat, est.b_hat, exact))
                    log(t, "balsi-trigger", i=i, D_hat=est.D_hat, b_hat=est.b_hat, exact=exact)
                    if exact:
                        t_f = t
                        theta_hat = make_theta(A_hat, S_hat, GPd_hat, S_r, P_r, est.b_hat, est.D_hat)
                        bank_d = ControlBank([theta_hat], chain, N)
                        info_tf = {"D_hat": est.D_hat, "b_hat": est.b_hat}
                        if output:
                            xi = cfg.xi_e
                            if xi == "estimate":
                                xi = estimate_xi_e(bank_d, X_s, V_s, range(nd), range(n))
                            rho_gain = rho_hat_gain(theta_hat, None if xi is None else float(xi))
                            info_tf.update(xi_e=xi, rho_hat_gain=rho_gain)
                        log(t, "t_f", **info_tf)

            # ---- control ----
            profile = state.line.preview()
            rho = rho_hat = 0.0
            if output:
                dU = hist.spread(t, D_lo, D_hi) if t_f is None or t < t_f else 0.0
                rho = env.update(k, t, obs.X_hat, obs.V_hat, dU, t_f)
                Vc = np.concatenate([obs.V_hat, state.V_r])
                Xc = obs.X_hat
            else:
                Vc, Xc = V, X
            if nominal:
                U = float(bank0.controls(Xc, Vc, profile, t)[0, 0])
                phase = 3
            elif t_f is None:
                bank = bank1 if dmd_done else bank0
                radius = rho if output else 0.0
                U, _ = robust_control(bank, Xc, Vc, profile, t, theta0, radius,
                                      range(nd) if output else (), range(n) if output else ())
                phase = 1 if dmd_done else 0
            else:
                if output:
                    rho_hat = rho_gain * rho
                    U = output_control(bank_d, Xc, Vc, profile, t, theta0, rho_hat)
                else:
                    U = float(bank_d.controls(Xc, Vc, profile, t)[0, 0])
                phase = 2
            if not np.isfinite(U):
                raise ConfigurationError("control became non-finite")
        except SaferegError as exc:
            raise RunAborted(exc, events, t) from exc
        hist.append(U)

        # ---- log row k ----
        r = float(P_r @ state.V_r)
        e = float(X[0] - r)
        h = float(spec.h(e, t))
        h1 = h + float(rescue.derivs(t, 0)[0])
        row = out[k]
        row[0] = t
        row[1:1 + n] = X
        row[1 + n:1 + n + nd] = state.V_d
        row[1 + n + nd:1 + n + nv] = state.V_r
        nxt = state.line.advanced(U, dt)
        row[ci["u0"]] = nxt.u0
        row[ci["U"]] = U
        row[ci["Y"]] = X[0]
        row[ci["r"]] = r
        row[ci["e"]] = e
        row[ci["h"]] = h
        row[ci["h1"]] = h1
        row[ci["phase"]] = phase
        row[ci["D_hat"]] = est.D_hat
        row[ci["b_hat"]] = est.b_hat
        row[ci["a_err"]] = float(np.max(np.abs(A_hat - sys.A)))
        row[ci["Sd_err"]] = float(np.max(np.abs(S_hat - exo.S_d)))
        row[ci["D_err"]] = abs(est.D_hat - sys.D)
        row[ci["b_err"]] = abs(est.b_hat - b_true)
        if output:
            row[ci["xhat1"]:ci["xhat1"] + n] = obs.X_hat
            row[ci["vdhat1"]:ci["vdhat1"] + nd] = obs.V_hat
            row[ci["eo_norm"]] = float(np.sqrt(np.sum((X - obs.X_hat) ** 2) + np.sum((state.V_d - obs.V_hat) ** 2)))
            row[ci["rho"]] = rho
            row[ci["rho_hat"]] = rho_hat
        if k == K:
            break

        # ---- advance truth, probes and observer ----
        new = stepper(state, U)
        if not nominal:
            probes.accumulate(new.line.values, dt, state.X, state.V, new.X, new.V, new.line.next_u0(dt))
        Y_hist[k + 1] = new.X[0]
        if output:
            D_obs = est.D_hat if (t_f is not None and t >= t_f) else boxes.D0
            U_del = (hist.at(t - D_obs), hist.at(t + 0.5 * dt - D_obs), hist.at(t + dt - D_obs))
            Lv, Lx = gain_sched.at(t)
            bo = boxes.b_known if boxes.b_box is None else est.b_hat
            Ys = (Y_hist[k], midpoint_value(Y_hist, k), Y_hist[k + 1])
            obs = observer_step(obs, Ys, U_del, A_hat, S_hat, GPd_hat, bo, Lv, Lx, dt)
        state = new

    info = {
        "verdict": verdict, "h_bounds": [h_lo, h_hi], "gains": list(map(float, gains)), "theta0": theta0,
        "gain_requirements": gain_req.tolist(), "gain_rule_ok": gain_rule_ok,
        "t_f": t_f, "dmd_time": D_lo if dmd_done else None, "D_true": sys.D, "b_true": b_true,
        "rescue_c": rescue.c if rescue.active else None, "D_upper": D_hi,
        "estimate_trace": [list(x) for x in est.trace],
        "delta_L": env.post.delta if output and env.post is not None else None,
    }
    res = RunResult(cfg, cols, out, events, info)
    res.metrics = compute_metrics(res, cfg)
    return res


def _run_one(cfg: ScenarioConfig):
    try:
        return run_closed_loop(cfg)
    except SaferegError as exc:
        return exc


def run_batch(configs, max_workers: int | None = None) -> list:
    """Run independent scenarios in separate processes.

    Returns one entry per config, in order: a :class:`RunResult` or the
    exception that stopped that run.
    """
    configs = list(configs)
    if max_workers == 1 or len(configs) <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_run_one, configs))


def truth_like_gbar(GPd, nr: int) -> np.ndarray:
    """``Ḡ = [G P_d, 0]`` acting on ``V = (V_d, V_r)``."""
    GPd = np.atleast_2d(np.asarray(GPd, dtype=float))
    return np.hstack([GPd, np.zeros((GPd.shape[0], nr))])


def compute_metrics(res: RunResult, cfg: ScenarioConfig, band_steps: int = 5, tol: float = 1e-3) -> dict:
    """Safety, regulation, identification and envelope figures from the series."""
    t = res.col("t")
    dt = cfg.dt
    info = res.info
    keep = np.ones_like(t, dtype=bool)
    for ts in (info.get("dmd_time"), info.get("t_f")):
        if ts is not None:
            keep &= ~((t >= ts - 1e-9) & (t < ts + band_steps * dt - 1e-9))
    h, h1, e = res.col("h"), res.col("h1"), res.col("e")
    D = info["D_true"]

    def masked_min(x, t0):
        m = keep & (t >= t0 - 1e-9)
        return float(np.min(x[m])) if np.any(m) else None

    rec_t = info["rescue_c"]
    m = {
        "scenario": cfg.name,
        "mode": cfg.mode,
        "verdict": info["verdict"],
        "h_bounds": info["h_bounds"],
        "gains": info["gains"],
        "gain_requirements": info["gain_requirements"],
        "gain_rule_ok": info["gain_rule_ok"],
        "min_h_after_D": masked_min(h, D),
        "min_h1_after_D": masked_min(h1, D),
        "recovery_time": rec_t,
        "min_h_after_recovery": masked_min(h, rec_t) if rec_t is not None else None,
        "final_abs_e": float(abs(e[-1])),
        "t_end": float(t[-1]),
        "t_f": info["t_f"],
        "max_abs_series": float(np.max(np.abs(res.series))),
    }
    if cfg.mode != "nominal":
        tf = info["t_f"]
        if tf is not None:
            i = int(np.argmin(np.abs(t - tf)))
            m.update(D_hat=float(res.col("D_hat")[i]), b_hat=float(res.col("b_hat")[i]),
                     D_err_at_tf=float(res.col("D_err")[i]), b_err_at_tf=float(res.col("b_err")[i]),
                     a_err_at_tf=float(res.col("a_err")[i]), Sd_err_at_tf=float(res.col("Sd_err")[i]),
                     estimates_constant_after_tf=bool(np.ptp(res.col("D_hat")[i:]) == 0
                                                      and np.ptp(res.col("b_hat")[i:]) == 0))
    if cfg.mode == "output-feedback":
        eo, rho = res.col("eo_norm"), res.col("rho")
        viol = np.sqrt(2.0) * eo > rho + 1e-6
        m["envelope_violations"] = int(np.sum(viol))
        m["delta_L"] = info["delta_L"]
        m["observer_decay_rate"] = decay_rate_fit(t, eo, info["t_f"])
    # closed-loop property checks; None marks a clause the horizon does not reach
    def at_least(v):
        return None if v is None else bool(v >= -tol)

    if m["verdict"] == "safe":
        safety_ok = at_least(m["min_h_after_D"])
    else:
        parts = [at_least(m["min_h1_after_D"]), at_least(m["min_h_after_recovery"])]
        safety_ok = False if False in parts else (None if all(p is None for p in parts) else True)
    ident_ok = True
    if cfg.mode != "nominal":
        ident_ok = m["t_f"] is not None and m.get("D_err_at_tf", 1) <= tol and m.get("b_err_at_tf", 1) <= tol \
            and m.get("a_err_at_tf", 1) <= 1e-6 and m.get("Sd_err_at_tf", 1) <= 1e-6
    m["checks"] = {
        "safety": safety_ok,
        "identification": bool(ident_ok),
        "regulation": bool(m["final_abs_e"] <= 1e-2) if t[-1] >= REGULATION_HORIZON - 1e-9 else None,
        "bounded": bool(m["max_abs_series"] <= 1e6),
    }
    if cfg.mode == "output-feedback":
        m["checks"]["envelope"] = m["envelope_violations"] == 0
    return m


def decay_rate_fit(t, eo, t_f, floor: float | None = None, skip: float = 2.0, tail: float = 2.0,
                   factor: float = 10.0):
    """Slope of ``-log|e_o|`` by least squares on ``[t_f + skip, t_floor]``.

    ``t_floor`` is where the error first drops below ``factor`` times its
    floor. The floor defaults to the median error over the last ``tail``
    seconds (at least 1e-10), which is where round-off and the residual
    identification error stop the decay. Returns None when fewer than 100
    samples qualify.
    """
    if t_f is None:
        return None
    t = np.asarray(t)
    eo = np.asarray(eo)
    if floor is None:
        floor = max(1e-10, float(np.median(eo[t >= t[-1] - tail])))
    m = t >= t_f + skip
    below = np.flatnonzero(m & (eo < factor * floor))
    if below.size:
        m &= t < t[below[0]]
    m &= eo > 0
    if np.sum(m) < 100:
        return None
    slope = np.polyfit(t[m], np.log(eo[m]), 1)[0]
    return float(-slope)
