"""Data-driven safe regulation of delayed strict-feedback systems.

Identification (DMD for the plant/disturbance model, batch least squares
for delay and input gain), a safety-constrained delay-compensating
regulator, an extended state observer and a closed-loop simulator.
"""
from .errors import SaferegError
from .simloop import (RunResult, ScenarioConfig, build_vehicle_scenario, builtin_scenario, compute_metrics,
                      load_scenario, run_batch, run_closed_loop)

__version__ = "0.1.0"

__all__ = [
    "SaferegError", "RunResult", "ScenarioConfig", "build_vehicle_scenario", "builtin_scenario",
    "compute_metrics", "load_scenario", "run_batch", "run_closed_loop", "__version__",
]
