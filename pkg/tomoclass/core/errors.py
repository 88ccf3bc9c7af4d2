# tomoclass/core/errors.py


class TomoclassError(Exception):
    """Base for every data/format/parameter failure raised by the library."""


class UsageError(TomoclassError):
    """Bad command line. The CLI maps this to exit code 1."""


# ---------- file formats ----------

class FormatError(TomoclassError, ValueError):
    pass


class TruncationError(FormatError):
    pass


class HeaderError(FormatError):
    pass


# ---------- data / domain ----------

class ShapeError(TomoclassError, ValueError):
    pass


class DomainError(TomoclassError, ValueError):
    pass


class ChannelError(TomoclassError, ValueError):
    pass


class DataError(TomoclassError, ValueError):
    pass


class SchemaError(TomoclassError, ValueError):
    pass


class ParameterError(TomoclassError, ValueError):
    pass


class ConfigError(ParameterError):
    pass


# ---------- splits ----------

class SplitFractionError(TomoclassError):
    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


class SaturationError(SplitFractionError):
    pass


# ---------- numerics ----------

class ConditioningError(TomoclassError, ArithmeticError):
    pass


class StatisticError(TomoclassError, ValueError):
    pass


class BandwidthError(StatisticError):
    pass


class EmptyEvaluationError(TomoclassError, ValueError):
    pass
