"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/domain/shape/format
problems exit 1, I/O problems exit 2.
"""


class VqsctError(Exception):
    """Base class for all package errors."""


class ShapeError(VqsctError, ValueError):
    """Operand shapes are inconsistent with each other or with an operation."""


class DomainError(VqsctError, ValueError):
    """A value is outside an operation's admissible domain."""


class FormatError(VqsctError, ValueError):
    """A serialized artifact (volume, checkpoint, report) is malformed."""


class TrainingError(VqsctError, RuntimeError):
    """Training cannot continue (non-finite gradients or loss)."""


class UsageError(VqsctError, ValueError):
    """Bad command-line arguments or run configuration."""
