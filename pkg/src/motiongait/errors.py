"""Exception hierarchy shared by all motiongait modules.

Each class carries the process exit code the CLI maps it to; anything not
listed here exits 1.
"""


class MotionGaitError(Exception):
    exit_code = 1


class DimensionError(MotionGaitError):
    """Tensor shapes or axes do not line up."""


class DomainError(MotionGaitError):
    """A value is outside the operation's domain (bad label, empty axis, ...)."""


class ContractError(MotionGaitError):
    """An API contract was violated (non-scalar backward root, single-class batch)."""


class SequenceTooShortError(DomainError):
    """Temporal extent is smaller than the temporal aggregation kernel."""


class ConfigError(MotionGaitError):
    exit_code = 2


class IngestionError(MotionGaitError):
    exit_code = 3


class NumericAbort(MotionGaitError):
    """Training hit a non-finite loss; aborted with a diagnostic dump."""

    exit_code = 4


class StorageError(MotionGaitError):
    exit_code = 5
