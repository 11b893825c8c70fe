"""Exception types raised across the package."""


class MsgdasError(Exception):
    """Base class for all package errors."""


class DimensionError(MsgdasError, ValueError):
    pass


class ConfigurationError(MsgdasError, ValueError):
    pass


class InputError(MsgdasError, ValueError):
    pass


class ContractError(MsgdasError, RuntimeError):
    """An operation was called with arguments violating its preconditions."""


class DegenerateDistributionError(MsgdasError, ValueError):
    pass


class ExhaustedSamplerError(MsgdasError, RuntimeError):
    pass


class IngestionError(MsgdasError, IOError):
    pass


class NonFiniteLossError(MsgdasError, FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
