"""Exception hierarchy shared by every module."""


class SoftTFError(Exception):
    """Base class for all package errors."""


class ContractError(SoftTFError, ValueError):
    """A precondition or invariant of an operation was violated."""


class ShapeError(ContractError):
    """Operand dimensions do not agree."""


class PretrainError(SoftTFError):
    """Pretraining finished below the configured accuracy threshold."""

    def __init__(self, message: str, accuracy: float, backbone=None):
        super().__init__(message)
        self.accuracy = accuracy
        self.backbone = backbone


class TrainingDiverged(SoftTFError):
    """Loss became NaN/Inf during task training."""


class CheckpointError(SoftTFError, IOError):
    """Base class for checkpoint load failures."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ParseError(SoftTFError, IOError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(SoftTFError, IOError):
    """Malformed or unknown configuration key."""
