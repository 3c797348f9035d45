import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safereg.simloop import BUILTIN_SCENARIOS, builtin_scenario, run_batch

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def vehicle_runs():
    """The four built-in vehicle runs (30 s each), executed once in parallel."""
    names = list(BUILTIN_SCENARIOS)
    results = run_batch([builtin_scenario(n) for n in names], max_workers=len(names))
    out = {}
    for name, res in zip(names, results):
        if isinstance(res, BaseException):
            raise res
        out[name] = res
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
