"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 2, DataError -> 3, NumericAbort -> 4.
"""


class RlqfsError(Exception):
    """Base class for package errors."""


class ContractError(RlqfsError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand dimensions are incompatible."""


class NumericInputError(RlqfsError):
    """An operation received non-finite input."""


class NumericAbort(RlqfsError):
    """Training produced a non-finite loss; the step is aborted loudly."""


class ConfigError(RlqfsError):
    """Invalid run configuration."""


class DataError(RlqfsError):
    """Malformed or inconsistent corpus data."""


class CheckpointFormatError(RlqfsError):
    """Checkpoint bytes do not parse or carry an unsupported version."""


class VocabHashMismatch(DataError):
    """Checkpoint was produced under a different vocabulary."""


class RewardError(RlqfsError):
    """A reward component failed (for example the embedder raised)."""
