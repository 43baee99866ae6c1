"""Exception types raised across the pipeline."""


class SynthPipeError(Exception):
    """Base class for all pipeline errors."""


class ParseError(SynthPipeError):
    pass


class HierarchyError(SynthPipeError):
    pass


class DuplicateIdError(SynthPipeError):
    pass


class DegenerateFrameError(SynthPipeError):
    pass


class InsufficientPatientsError(SynthPipeError):
    pass


class ShapeError(SynthPipeError, ValueError):
    pass


class DivergenceError(SynthPipeError):
    pass


class EmptyDatasetError(SynthPipeError, ValueError):
    pass


class BackboneLoadError(SynthPipeError):
    pass


class DegenerateSetError(SynthPipeError, ValueError):
    pass


class DimensionMismatchError(SynthPipeError, ValueError):
    pass


class UntrainedClassifierError(SynthPipeError):
    pass


class EmptySeriesError(SynthPipeError, ValueError):
    pass


class SingleClassError(SynthPipeError, ValueError):
    pass


class MissingCheckpointError(SynthPipeError):
    pass


class LeakageError(SynthPipeError):
    """Holdout data overlaps training provenance, or is not purely real."""
