"""Scenario ingestion, the tick loop and marketplace health metrics."""

from .engine import Simulation, SimulationResult, run
from .metrics import MetricsReport, emit_report, gini
from .scenario import ScenarioConfig, bundled_scenarios, config_from_dict, load_scenario

__all__ = [
    "MetricsReport",
    "ScenarioConfig",
    "Simulation",
    "SimulationResult",
    "bundled_scenarios",
    "config_from_dict",
    "emit_report",
    "gini",
    "load_scenario",
    "run",
]
