"""Pseudonymous authentication and billing for dynamic wireless charging."""

from .errors import DwptError
from .pairing import SystemParams, setup
from .simnet import ScenarioConfig, Topology, VehiclePlan, attack_suite, run_scenario

__all__ = [
    "DwptError",
    "ScenarioConfig",
    "SystemParams",
    "Topology",
    "VehiclePlan",
    "attack_suite",
    "run_scenario",
    "setup",
]
__version__ = "0.1.0"
