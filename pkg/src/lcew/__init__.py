"""Lane-change early warning: interaction-aware trajectory prediction, side-collision
detection, surrogate safety measures and a ramp-merge microsimulator."""

from .errors import DataError, InsufficientSamplesError, LCEWError, SchemaError, TrainingDiverged
from .graphkernels import KernelKind

__version__ = "0.1.0"

__all__ = ["DataError", "InsufficientSamplesError", "KernelKind", "LCEWError", "SchemaError",
           "TrainingDiverged", "__version__"]
