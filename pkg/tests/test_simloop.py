import json

import numpy as np
import pytest

from safereg.errors import ConfigurationError
from safereg.simloop import (BUILTIN_SCENARIOS, REGULATION_HORIZON, RunResult, build_vehicle_scenario,
                             builtin_scenario, compute_metrics, decay_rate_fit, load_scenario, run_batch,
                             run_closed_loop, save_scenario)


@pytest.mark.parametrize("name", sorted(BUILTIN_SCENARIOS))
def test_builtin_files_match_builders(name):
    cfg = builtin_scenario(name)
    assert cfg == build_vehicle_scenario(*BUILTIN_SCENARIOS[name])
    cfg.validate()


def test_json_round_trip(tmp_path):
    cfg = build_vehicle_scenario("E2", 2)
    p = tmp_path / "s.json"
    save_scenario(cfg, p)
    assert load_scenario(str(p)) == cfg
    assert load_scenario(json.loads(p.read_text())) == cfg
    assert load_scenario("vehicle_e2_case2") == cfg


def test_load_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_scenario(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_scenario(str(bad))
    d = build_vehicle_scenario("E1", 1).to_dict()
    d["schema_version"] = 99
    with pytest.raises(ConfigurationError):
        load_scenario(d)
    d = build_vehicle_scenario("E1", 1).to_dict()
    d["colour"] = "red"
    with pytest.raises(ConfigurationError):
        load_scenario(d)
    with pytest.raises(ConfigurationError):
        build_vehicle_scenario("E3", 1)


def test_overrides():
    cfg = build_vehicle_scenario("E1", 1).with_overrides({"T_end": 5.0, "gains": [4.0, 2.0]})
    assert cfg.T_end == 5.0 and cfg.gains == [4.0, 2.0]
    with pytest.raises(ConfigurationError):
        cfg.with_overrides({"no_such_key": 1})


@pytest.mark.parametrize("override,needle", [
    ({"D": 5.0}, "D = 5.0 outside"),
    ({"A": [[0.0, 1.0], [0.0, -3.0]]}, "outside"),
    ({"T_d": 0.2}, "snapshot span"),
    ({"mode": "bogus"}, "mode must be"),
    ({"T_a": 0.0015}, "multiple of dt"),
    ({"delay_mode": "upwind", "dt": 0.1}, "exceeds D dx"),
])
def test_validation_errors(override, needle):
    cfg = build_vehicle_scenario("E1", 1).with_overrides(override)
    with pytest.raises(ConfigurationError, match=needle):
        cfg.validate()


def test_output_feedback_needs_state_box():
    cfg = build_vehicle_scenario("E2", 1).with_overrides({"state_lo": None, "state_hi": None})
    with pytest.raises(ConfigurationError, match="state_lo"):
        cfg.validate()


def test_short_run_is_deterministic_and_identifies():
    cfg = build_vehicle_scenario("E1", 1)
    a = run_closed_loop(cfg, T_end=2.2)
    b = run_closed_loop(cfg, T_end=2.2)
    assert np.array_equal(a.series, b.series)
    m = a.metrics
    assert m["t_f"] == pytest.approx(2.0)
    assert m["checks"]["identification"] and m["checks"]["regulation"] is None
    assert m["D_hat"] == pytest.approx(1.5, abs=1e-3) and m["b_hat"] == pytest.approx(0.2, abs=1e-3)
    kinds = [ev["event"] for ev in a.events]
    assert kinds[0] == "start" and "dmd-identified" in kinds and "t_f" in kinds
    assert set(np.unique(a.col("phase"))) <= {0.0, 1.0, 2.0}


def test_nominal_mode_skips_identification():
    cfg = build_vehicle_scenario("E1", 1).with_overrides({"mode": "nominal"})
    res = run_closed_loop(cfg, T_end=1.0)
    assert res.info["t_f"] is None and "D_hat" not in res.metrics
    assert np.all(res.col("phase") == 3.0)


def test_run_writes_outputs(tmp_path):
    res = run_closed_loop(build_vehicle_scenario("E1", 2).with_overrides({"mode": "nominal"}), T_end=0.5)
    res.write(tmp_path)
    header = (tmp_path / "series.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["t", "x1", "x2"]
    assert json.loads((tmp_path / "metrics.json").read_text())["scenario"] == "vehicle_e1_case2"
    assert json.loads((tmp_path / "events.json").read_text())[0]["event"] == "start"


def test_run_batch_sequential_matches_single():
    cfg = build_vehicle_scenario("E1", 1).with_overrides({"mode": "nominal", "T_end": 0.3})
    out = run_batch([cfg], max_workers=1)
    assert isinstance(out[0], RunResult)
    assert np.array_equal(out[0].series, run_closed_loop(cfg).series)


def fake_result(h, h1, e, verdict, D=1.0, rescue_c=None):
    t = np.arange(len(h)) * 0.1
    cols = ["t", "h", "h1", "e"]
    cfg = build_vehicle_scenario("E1", 1).with_overrides({"mode": "nominal", "dt": 0.1})
    info = {"verdict": verdict, "h_bounds": [0.0, 0.0], "gains": [3.0, 1.0], "gain_requirements": [0.0, 0.0],
            "gain_rule_ok": True, "t_f": None, "dmd_time": None, "D_true": D, "rescue_c": rescue_c,
            "delta_L": None}
    return RunResult(cfg, cols, np.column_stack([t, h, h1, e]), [], info), cfg


def test_metrics_checks_are_none_beyond_horizon():
    h = np.r_[-5.0, np.ones(20)]
    res, cfg = fake_result(h, np.ones(21), np.full(21, 0.5), "unsafe", rescue_c=4.5)
    m = compute_metrics(res, cfg)
    # the recovery instant lies beyond the 2 s series: that clause is not evaluated
    assert m["min_h_after_recovery"] is None
    assert m["checks"]["safety"] is True and m["checks"]["regulation"] is None
    res, cfg = fake_result(np.ones(21), -np.ones(21), np.zeros(21), "unsafe", rescue_c=4.5)
    assert compute_metrics(res, cfg)["checks"]["safety"] is False


def test_metrics_safe_verdict_uses_h_after_delay():
    h = np.r_[-1.0, -1.0, np.ones(19)]
    res, cfg = fake_result(h, h, np.zeros(21), "safe", D=0.2)
    m = compute_metrics(res, cfg)
    assert m["min_h_after_D"] == 1.0 and m["checks"]["safety"] is True
    assert REGULATION_HORIZON == 30.0


def test_decay_rate_fit_recovers_exponential():
    t = np.linspace(0, 20, 20001)
    eo = 3.0 * np.exp(-0.8 * t) + 1e-9
    assert decay_rate_fit(t, eo, 1.0) == pytest.approx(0.8, rel=1e-2)
    assert decay_rate_fit(t, eo, None) is None
    assert decay_rate_fit(t[:50], eo[:50], 0.0) is None
