"""Exception hierarchy shared across quantbench."""


class QuantBenchError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(QuantBenchError, ValueError):
    pass


class ContractError(QuantBenchError):
    """An operation was called outside its precondition."""


class InvalidRangeError(QuantBenchError, ValueError):
    pass


class CalibrationError(QuantBenchError):
    pass


class StateError(QuantBenchError):
    """A quantizer or model was used before it was calibrated."""


class CorruptModelError(QuantBenchError):
    pass


class ManifestError(QuantBenchError):
    pass


class ConfigError(QuantBenchError, ValueError):
    pass


class TrainingError(QuantBenchError):
    pass


class InfeasibleCapError(QuantBenchError, ValueError):
    pass


class IDXParseError(QuantBenchError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
