"""Exception hierarchy shared by every module of the package."""


class EnsembleDaeError(Exception):
    """Base class for all package errors."""


class DimensionError(EnsembleDaeError, ValueError):
    """Input shapes are incompatible with the requested operation."""


class ConfigurationError(EnsembleDaeError, ValueError):
    """An unsupported kind, preset or parameter value was requested."""


class ContractError(EnsembleDaeError, ValueError):
    """A documented precondition of an operation was violated."""


class DomainError(EnsembleDaeError, ValueError):
    """A value lies outside the domain of the operation (e.g. a label index)."""


class NumericalError(EnsembleDaeError, FloatingPointError):
    """A computation produced NaN or Inf from finite inputs."""


class SpecError(EnsembleDaeError, ValueError):
    """A model specification does not compose.

    ``layer_index`` names the offending layer when known.
    """

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class TrainingError(EnsembleDaeError, RuntimeError):
    """Training diverged; ``epoch`` is the 1-based epoch where it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IngestionError(EnsembleDaeError, ValueError):
    """A dataset file is malformed."""


class AttackError(EnsembleDaeError, RuntimeError):
    """Attack generation failed for an (algorithm, model) pair."""


class EnsembleSizeError(EnsembleDaeError, MemoryError):
    """The DAE training set would exceed the configured memory budget."""


class UndefinedMetricError(EnsembleDaeError, ArithmeticError):
    """A metric is undefined for the given inputs (e.g. division by zero)."""


class MissingDefenseError(EnsembleDaeError, KeyError):
    """Required baseline defenses are absent from the pool.

    ``missing`` lists every absent defense key.
    """

    def __init__(self, missing):
        super().__init__(f"missing defenses in pool: {sorted(map(str, missing))}")
        self.missing = list(missing)


class CheckpointError(EnsembleDaeError, ValueError):
    """Base class for checkpoint decoding failures; ``code`` is stable."""

    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionError(CheckpointError):
    code = 12


class TruncatedError(CheckpointError):
    code = 13


class DimMismatchError(CheckpointError):
    code = 14


class MetadataError(CheckpointError):
    code = 15


class TrailingDataError(CheckpointError):
    code = 16


class StageError(EnsembleDaeError, RuntimeError):
    """A pipeline stage failed; carries the stage name and an exit code."""

    def __init__(self, stage, cause, exit_code):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code
