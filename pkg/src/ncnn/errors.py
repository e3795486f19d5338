"""Exception types raised across the package."""


class NcnnError(Exception):
    """Base class for all package errors."""


class DimensionError(NcnnError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(NcnnError, ValueError):
    """An argument violates a documented precondition."""


class DomainError(ContractError):
    """A value lies outside the domain a function is defined on."""


class ConfigurationError(NcnnError, ValueError):
    """A model, fold or training configuration cannot be realized."""


class FormatError(NcnnError):
    """A checkpoint file is malformed.

    ``field`` names the offending header field or parameter record.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class IngestionError(NcnnError):
    """A manifest row could not be turned into a sample."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class TrainingError(NcnnError, RuntimeError):
    """Training diverged (non-finite loss) for a fold."""
