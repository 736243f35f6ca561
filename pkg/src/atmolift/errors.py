"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/contract problems are
usage errors (exit 2), data and file-format problems are data errors
(exit 3), numerical blow-ups are divergence errors (exit 4).
"""


class ContractError(ValueError):
    """An operation was called with arguments violating its precondition."""


class ConfigurationError(ContractError):
    """A model or run configuration is internally inconsistent."""


class DataError(RuntimeError):
    """Base class for dataset and file problems."""


class FormatError(DataError):
    """Bytes do not parse as the expected file format."""


class UnsupportedFormatError(FormatError):
    """The format was recognized but is a variant we do not read."""


class CorruptionError(DataError):
    """A file parsed but its payload is inconsistent with its metadata."""


class DivergenceError(RuntimeError):
    """A numerical computation produced non-finite values."""


class StabilityError(DivergenceError):
    """A solver step violated its stability bound."""
