"""Exception hierarchy shared by every dltm module.

The CLI maps each class to a stable single-line error prefix, so the class
name doubles as a machine-readable error kind.
"""


class DltmError(Exception):
    """Base class for all package errors."""

    kind = "error"


class DimensionError(DltmError, ValueError):
    kind = "dimension"


class NumericError(DltmError, ArithmeticError):
    kind = "numeric"


class ContractError(DltmError, ValueError):
    kind = "contract"


class DataError(DltmError, ValueError):
    kind = "data"


class FormatError(DltmError, ValueError):
    kind = "format"


class ConfigError(DltmError, ValueError):
    kind = "config"


class DatasetIOError(DltmError, OSError):
    kind = "io"


class LockError(DltmError, RuntimeError):
    kind = "lock"
