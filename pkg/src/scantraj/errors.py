"""Exception and warning types shared across the pipeline."""


class ScanTrajError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(ScanTrajError, ValueError):
    """Bad input data or arguments."""


class OutOfBounds(ValidationError):
    pass


class EmptySource(ValidationError):
    pass


class InconsistentFrameSize(ValidationError):
    pass


class TileTooLarge(ValidationError):
    pass


class TooFewFrames(ValidationError):
    pass


class ZeroMatrix(ValidationError):
    pass


class RankDeficient(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class BadProportions(ValidationError):
    pass


class OutOfCalibrationRange(ValidationError):
    pass


class NoOverlap(ValidationError):
    pass


class SpecOutOfRange(ValidationError):
    pass


class FormatError(ValidationError):
    """A binary or JSON artifact failed to parse."""


class DivergenceDetected(ScanTrajError, RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class PipelineWarning(UserWarning):
    pass


class IllConditioned(PipelineWarning):
    pass


class NoBackgroundMode(PipelineWarning):
    pass


class DegenerateHistogram(PipelineWarning):
    pass
