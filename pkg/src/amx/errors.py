"""Exception hierarchy shared across the package."""


class AmxError(Exception):
    """Base class for all errors raised by amx."""


class DimensionError(AmxError, ValueError):
    pass


class ContractError(AmxError, ValueError):
    pass


class NumericError(AmxError, FloatingPointError):
    pass


class ConfigError(AmxError, ValueError):
    pass


class FormatError(AmxError, ValueError):
    """A file does not follow the expected on-disk format."""


class ParseError(FormatError):
    pass


class CorruptionError(FormatError):
    pass


class IngestionError(AmxError):
    pass


class TrainingError(AmxError, RuntimeError):
    pass


class EvaluationError(AmxError, ValueError):
    pass
