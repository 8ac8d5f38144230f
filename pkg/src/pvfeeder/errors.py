"""Exception hierarchy shared by all pvfeeder modules."""


class PvFeederError(Exception):
    """Base class for all package errors."""


class ParameterError(PvFeederError, ValueError):
    """An argument is outside its valid domain."""


class TopologyError(PvFeederError):
    """The network graph is disconnected, non-radial where required, or singular."""


class AssemblyError(PvFeederError):
    """An optimisation problem could not be assembled from its inputs."""


class ConfigError(PvFeederError):
    """A scenario configuration file is malformed or fails validation."""


class PowerFlowError(PvFeederError):
    """The AC power flow diverged; the simulation cannot continue."""
