"""Tightly coupled multi-antenna CDGNSS/INS navigation.

The public entry points are :func:`run_filter` for a simulated drive and
:func:`run_monte_carlo` for the single-epoch linearization study.
"""

from __future__ import annotations

from importlib.metadata import PackageNotFoundError, version

from .config import ConfigError, RunConfig
from .montecarlo import MonteCarloSpec, run_monte_carlo
from .pipeline import NumericalFailure, run_filter
from .simulator import Scenario, false_fix_scenario, static_scenario, urban_drive

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "ConfigError",
    "MonteCarloSpec",
    "NumericalFailure",
    "RunConfig",
    "Scenario",
    "false_fix_scenario",
    "run_filter",
    "run_monte_carlo",
    "static_scenario",
    "urban_drive",
]
