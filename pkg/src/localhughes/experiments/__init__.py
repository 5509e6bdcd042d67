"""Scenarios, presets, metrics, sweeps and the command line entry point."""
from .metrics import NOT_REACHED, evacuation_time, saturation_time
from .run import RunReport, run_scenario, sweep, vision_sweep
from .scenario import (PRESETS, Scenario, ScenarioError, dump_preset, initial_density_1d, initial_density_2d,
                       load_scenario, parse_scenario, preset)

__all__ = ["NOT_REACHED", "evacuation_time", "saturation_time", "RunReport", "run_scenario", "sweep",
           "vision_sweep", "PRESETS", "Scenario", "ScenarioError", "dump_preset", "initial_density_1d",
           "initial_density_2d", "load_scenario", "parse_scenario", "preset"]
