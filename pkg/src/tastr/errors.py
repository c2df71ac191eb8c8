"""Exception hierarchy shared across the package."""


class TastrError(Exception):
    """Base class for all package errors."""


class DatasetParseError(TastrError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionError(TastrError, ValueError):
    pass


class IntegrityError(TastrError):
    pass


class TopologyError(TastrError):
    pass


class ConfigError(TastrError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ContractError(TastrError, ValueError):
    pass


class SamplingInfeasibleError(TastrError):
    pass


class ClusterError(TastrError, ValueError):
    pass


class ProtocolError(TastrError, ValueError):
    pass
