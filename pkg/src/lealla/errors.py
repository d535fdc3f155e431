"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalAbort -> 3. Contract/shape errors indicate misuse of library
internals and are treated as config-class failures if they ever reach
the CLI boundary.
"""


class LeallaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LeallaError):
    """Invalid configuration: bad hyperparameters, presets, or run setup."""


class DataError(LeallaError):
    """Invalid or missing input data: corpora, embedding files, gold pairs."""


class FormatError(DataError):
    """A file does not follow its declared on-disk format."""


class CorruptionError(DataError):
    """A file follows the format but its content is internally inconsistent."""


class NumericalAbort(LeallaError):
    """Training aborted on a non-finite loss or gradient."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ContractError(LeallaError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""
