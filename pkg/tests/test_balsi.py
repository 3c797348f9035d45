import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safereg.balsi import (ProbeBank, Theta2Estimate, TriggerSchedule, batch_update, detect_tf,
                           write_estimate_trace)
from safereg.errors import ConfigurationError, DataInconsistencyError
from safereg.plant import DelayLine, TruthStepper, initial_state
from safereg.simloop import build_vehicle_scenario


def test_sine_probe_closed_forms():
    bank = ProbeBank(100, n_modes=4)
    x = np.linspace(0, 1, 101)
    assert np.all(bank.sine_probe(np.zeros(101)) == 0.0)
    ones = bank.sine_probe(np.ones(101))
    ref = [-2 / (np.pi * k) if k % 2 else 0.0 for k in range(1, 5)]
    assert np.allclose(ones, ref, atol=1e-3)
    s = bank.sine_probe(np.sin(np.pi * x))
    assert s[0] == pytest.approx(-0.5, abs=1e-12)
    assert np.allclose(s[1:], 0.0, atol=1e-12)


def drive_line(line, bank, inputs, dt, D):
    """Step a delay line and the probes; return the worst |f_n - D q_n|."""
    worst = 0.0
    for U in inputs:
        line = line.advanced(U, dt)
        worst = max(worst, np.max(np.abs(bank.f - D * bank.sine_probe(line.values))))
        bank.accumulate(line.values, dt)
    return line, worst


@settings(max_examples=20)
@given(st.sampled_from(["upwind", "exact"]), st.floats(0.5, 2.0),
       st.lists(st.floats(-3, 3), min_size=3, max_size=6))
def test_delay_identity_on_simulated_lines(mode, D, coeffs):
    dt = 1e-3 if mode == "upwind" else D / 200
    line = DelayLine.for_grid(D, dt, mode, 100)
    bank = ProbeBank(line.N, 5)
    t = np.arange(int(3.0 / dt)) * dt
    U = sum(c * np.sin((k + 1) * t) for k, c in enumerate(coeffs))
    _, worst = drive_line(line, bank, U, dt, D)
    assert worst <= 1e-10 * max(1.0, np.abs(U).max())


def test_zero_field_keeps_probes_zero():
    line = DelayLine.for_grid(1.5, 1e-3, "upwind", 100)
    bank = ProbeBank(100, 5)
    drive_line(line, bank, np.zeros(500), 1e-3, 1.5)
    assert np.all(bank.f == 0.0) and np.all(bank.q == 0.0) and np.all(bank.cumQ == 0.0)


def test_input_channel_identity_on_vehicle_data():
    cfg = build_vehicle_scenario("E1", 1)
    sys_, exo = cfg.system(), cfg.exosystem()
    dt = 1e-3
    state = initial_state(sys_, exo, cfg.X0, cfg.V_d0, cfg.V_r0, dt, mode="exact")
    step = TruthStepper(sys_, exo, dt)
    bank = ProbeBank(state.line.N, 5, n=2, n_v=exo.n_v, X0=cfg.X0)
    a_row, g_row = sys_.A[-1], exo.Gbar(sys_.G)[-1]
    worst = 0.0
    for k in range(4000):
        new = step(state, np.sin(k * dt) + 0.5)
        bank.accumulate(new.line.values, dt, state.X, state.V, new.X, new.V, new.line.next_u0(dt))
        state = new
        worst = max(worst, abs(bank.f_b(state.X, a_row, g_row) - sys_.b * bank.qb))
    assert worst <= 1e-6


def test_window_information_is_monotone():
    line = DelayLine.for_grid(1.0, 1e-3, "upwind", 100)
    bank = ProbeBank(100, 5)
    bank.record_trigger(0)
    rng = np.random.default_rng(3)
    for i in range(1, 6):
        line, _ = drive_line(line, bank, rng.standard_normal(1000), 1e-3, 1.0)
        bank.record_trigger(i)
    for g in range(5):
        Q = [bank.window(g, i)[1] for i in range(g + 1, 6)]
        assert all(np.all(b >= a) for a, b in zip(Q, Q[1:]))


def test_batch_update_keeps_previous_without_information():
    prev = Theta2Estimate(2.0, 0.5)
    out = batch_update(np.zeros(5), np.zeros(5), 0.0, 0.0, prev, (1.0, 3.0), (0.1, 1.0))
    assert (out.D_hat, out.b_hat) == (2.0, 0.5)


def test_batch_update_recovers_delay_from_constant_field():
    D, dt = 1.5, 1e-3
    line = DelayLine.for_grid(D, dt, "upwind", 100)
    bank = ProbeBank(100, 5)
    line, _ = drive_line(line, bank, np.ones(2000), dt, D)
    bank.record_trigger(0)
    line, _ = drive_line(line, bank, np.ones(2000), dt, D)
    bank.record_trigger(1)
    Fn, Qn, _, _ = bank.window(0, 1)
    out = batch_update(Fn, Qn, None, None, Theta2Estimate(2.0, None), (1.0, 3.0), window_len=2.0)
    assert out.D_hat == pytest.approx(D, abs=1e-4)


def test_batch_update_clamps_and_flags_inconsistency():
    prev = Theta2Estimate(2.0, None)
    out = batch_update([10.0], [1.0], None, None, prev, (1.0, 3.0))
    assert out.D_hat == 3.0
    with pytest.raises(DataInconsistencyError):
        batch_update([1.5, 2.5], [1.0, 1.0], None, None, prev, (1.0, 3.0))


def test_trigger_schedule():
    s = TriggerSchedule(1.0, 2)
    assert [s.instant(i) for i in range(4)] == [0.0, 1.0, 2.0, 3.0]
    assert s.window_start(1) == 0.0 and s.window_start(4) == 2.0
    s.check_first_update(1.0)
    with pytest.raises(ConfigurationError):
        TriggerSchedule(0.5, 2).check_first_update(1.0)
    with pytest.raises(ConfigurationError):
        TriggerSchedule(1.0, 0)


def test_detect_tf_examples():
    sched = TriggerSchedule(1.0, 2)
    t = np.arange(0, 5, 1e-3)
    assert detect_tf(t, np.zeros_like(t), sched) is None
    u0 = np.where(t >= 1.5, 1.0, 0.0)
    assert detect_tf(t, u0, sched) == 2.0
    assert detect_tf(t, u0, sched, t_min=3.0) == 3.0


@given(st.floats(0.01, 4.0), st.floats(0.2, 2.0))
def test_detect_tf_is_first_trigger_after_excitation(t_exc, T_a):
    sched = TriggerSchedule(T_a, 2)
    t = np.linspace(0, 20, 20001)
    tf = detect_tf(t, (t >= t_exc).astype(float), sched)
    first = t[np.argmax(t >= t_exc)]
    assert tf > first - 1e-12 and tf - T_a <= first + 1e-12


def test_estimate_trace_csv(tmp_path):
    p = tmp_path / "trace.csv"
    write_estimate_trace(p, [(1.0, 2.0, None, False), (2.0, 1.5, 0.2, True)])
    lines = p.read_text().splitlines()
    assert lines[0] == "t_i,D_hat,b_hat,is_exact"
    assert lines[2].startswith("2.000000,1.5,0.2,1")
