"""Exception hierarchy.

Every error carries a short ``category`` string so the command line can emit a
single machine-parseable line on failure.
"""


class BitDAEError(Exception):
    category = "error"


class ConfigurationError(BitDAEError, ValueError):
    category = "config"


class ShapeError(BitDAEError, ValueError):
    category = "shape"


class TimestepError(BitDAEError, IndexError):
    category = "index"


class DataError(BitDAEError, ValueError):
    category = "data"


class NumericError(BitDAEError, FloatingPointError):
    category = "numeric"


class DegenerateClassifierError(NumericError):
    category = "degenerate-classifier"


class CorruptionError(BitDAEError, IOError):
    category = "corruption"


class VersionError(BitDAEError, IOError):
    category = "version"
