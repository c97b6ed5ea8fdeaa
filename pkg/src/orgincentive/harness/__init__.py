"""Scenario configuration, synthetic instances, pipeline runs and reports."""

from .config import ScenarioConfig, SynthSpec, load_config
from .pipeline import ScenarioError, ScenarioReport, run_scenario, sweep
from .report import emit_report, read_report
from .synth import synthesize_instance

__all__ = [
    "ScenarioConfig",
    "ScenarioError",
    "ScenarioReport",
    "SynthSpec",
    "emit_report",
    "load_config",
    "read_report",
    "run_scenario",
    "sweep",
    "synthesize_instance",
]
