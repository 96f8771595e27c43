"""Exception hierarchy. Each class carries the process exit code the CLI maps it to."""


class GpsGenError(Exception):
    exit_code = 1


class ConfigError(GpsGenError, ValueError):
    exit_code = 2


class DataError(GpsGenError):
    exit_code = 3


class NumericError(GpsGenError, ArithmeticError):
    exit_code = 4


class RangeError(DataError, ValueError):
    """A coordinate fell outside the declared bounding box."""


class UndefinedAzimuthError(DataError, ValueError):
    """Azimuth requested for a point that coincides with the landmark center."""


class VocabularyError(DataError, KeyError):
    pass


class CheckpointError(DataError):
    pass
