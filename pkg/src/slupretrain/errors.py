"""Exception types raised across the package."""


class SLUError(Exception):
    """Base class for all package errors."""


class ManifestError(SLUError, ValueError):
    pass


class AudioFormatError(SLUError, ValueError):
    pass


class VocabularyError(SLUError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class AlignmentError(SLUError, ValueError):
    pass


class CheckpointError(SLUError):
    pass


class ScheduleError(SLUError, ValueError):
    pass


class TrainingDivergedError(SLUError, RuntimeError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
