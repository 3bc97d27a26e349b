"""Exception taxonomy; the CLI maps these onto distinct exit codes."""


class PrivmapError(Exception):
    """Base class for all package errors."""


class GeographyError(PrivmapError):
    pass


class TabulationError(PrivmapError):
    pass


class ProtectionError(PrivmapError):
    pass


class StandardizationError(PrivmapError):
    pass


class ModelError(PrivmapError):
    pass


class SimulationError(PrivmapError):
    pass


class ConfigError(PrivmapError):
    pass


class MissingInputError(PrivmapError):
    pass
