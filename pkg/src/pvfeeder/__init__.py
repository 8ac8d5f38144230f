"""Voltage management for low-voltage feeders with high PV penetration.

Radial power flow, inverter droop and trip models, a coordinated curtailment
controller, grid-support dispatch and the scenario engine that ties them together.
"""

from .errors import (
    AssemblyError,
    ConfigError,
    ParameterError,
    PowerFlowError,
    PvFeederError,
    TopologyError,
)

__all__ = [
    "AssemblyError",
    "ConfigError",
    "ParameterError",
    "PowerFlowError",
    "PvFeederError",
    "TopologyError",
]
