"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
data/IO problems exit 2, numeric failures exit 3.
"""


class DartError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DartError):
    """Operand shapes are incompatible with an operation."""


class ContractError(DartError):
    """A documented precondition on an argument was violated."""


class ConfigError(DartError):
    """Invalid or inconsistent configuration."""


class DataFormatError(DartError):
    """A data file is malformed (bad magic, truncation, count mismatch)."""


class NumericError(DartError):
    """A computation produced a non-finite value."""
