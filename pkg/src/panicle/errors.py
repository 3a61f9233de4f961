"""Exception hierarchy shared by the whole pipeline."""


class PanicleError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(PanicleError):
    """An argument value is outside its documented domain."""


class ShapeError(PanicleError):
    """Array dimensions are inconsistent with what an operation requires."""


class AnnotationError(PanicleError):
    """An annotation references pixels or superpixels that do not exist."""


class DataGapError(PanicleError):
    """A required record (e.g. a weather day) is missing."""


class TrainingError(PanicleError):
    """Training diverged or could not start."""


class DegenerateInputError(PanicleError):
    """The input is valid but the requested statistic is undefined on it."""


class FormatError(PanicleError):
    """A persisted artifact could not be parsed."""
