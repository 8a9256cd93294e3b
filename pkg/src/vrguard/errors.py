"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ContractViolation and its subclasses map
to exit code 1, I/O and schema problems (DataFormatError subclasses,
ModelFormatError subclasses, OSError) map to exit code 2.
"""


class VrguardError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(VrguardError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(ContractViolation):
    """An invalid configuration value or combination."""


class NumericError(VrguardError):
    """A non-finite value appeared where the numeric contract forbids it."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class DataFormatError(VrguardError):
    """Base for ingestion problems (exit code 2 territory)."""


class SchemaError(DataFormatError):
    """A required column or field is missing or misdeclared."""


class ParseError(DataFormatError):
    """A cell failed to parse; carries the offending row index."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class OrderingError(DataFormatError):
    """Timestamps are not strictly increasing."""


class InsufficientDataError(ContractViolation):
    """Not enough frames/samples for the requested operation."""


class ModelFormatError(VrguardError):
    """Base for model/detector container load failures."""


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class DegenerateTrainingError(ContractViolation):
    """Training set lacks the variety the estimator requires (e.g. one class)."""


class DuplicateSignatureError(ContractViolation):
    """Repository append would create a duplicate (window id, model) pair."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)
