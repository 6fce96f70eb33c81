"""Exception taxonomy shared across the pipeline.

Exit-code mapping used by the CLI: ConfigError/InputError -> 2,
DependencyError -> 3, AlignmentError -> 4, DivergenceAbort -> 5.
"""


class LatentFaceError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(LatentFaceError):
    """Invalid configuration value; message names the offending field."""


class InputError(LatentFaceError):
    """Malformed user input (token strings, bad file paths)."""


class DependencyError(LatentFaceError):
    """A required artifact is missing, corrupt, or version-incompatible."""


class AlignmentError(LatentFaceError):
    """Audio-visual or token-frame alignment violated; never silently truncated."""


class DivergenceAbort(LatentFaceError):
    """Training aborted on a non-finite loss; carries epoch/batch/component."""

    def __init__(self, message, *, phase=None, epoch=None, batch=None, component=None):
        super().__init__(message)
        self.phase = phase
        self.epoch = epoch
        self.batch = batch
        self.component = component


class TrainingFailure(LatentFaceError):
    """An expert finished training below its validation floor."""

    def __init__(self, message, *, kind=None, score=None, floor=None):
        super().__init__(message)
        self.kind = kind
        self.score = score
        self.floor = floor


class ContractViolation(ValueError, LatentFaceError):
    """A documented precondition on operation inputs was violated."""
