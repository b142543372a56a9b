"""Exception hierarchy shared by every module.

The CLI maps ``ConfigError`` to exit code 2 and ``DataError`` to exit code 3.
"""


class InflateNNError(Exception):
    pass


class ConfigError(InflateNNError, ValueError):
    pass


class DataError(InflateNNError, ValueError):
    pass


class DimensionError(DataError):
    pass


class DomainError(DataError):
    pass


class StateError(InflateNNError, RuntimeError):
    pass


class UndefinedMetricError(DomainError):
    pass


class DegenerateStatsError(DomainError):
    pass


class UnsupportedLayerError(ConfigError):
    pass


class CompositionError(ConfigError):
    pass


class FormatError(DataError):
    """Bad magic or malformed header in a binary pack."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LengthError(FormatError):
    pass


class NonFiniteError(DataError):
    pass


class TrainingError(InflateNNError, RuntimeError):
    pass
