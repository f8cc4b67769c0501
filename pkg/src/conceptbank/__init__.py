"""Concept bank: event-specific concept discovery from tagged images,
multiple-kernel concept detectors, and concept-based video event
detection and zero-shot retrieval."""

from .config import PipelineConfig
from .errors import (
    ConceptBankError,
    DataFormatError,
    DegenerateSigmaWarning,
    PreconditionError,
)
from .pipeline import STAGES, run_all, run_stage
from .store import ModelStore

__version__ = "0.1.0"

__all__ = [
    "ConceptBankError",
    "DataFormatError",
    "DegenerateSigmaWarning",
    "ModelStore",
    "PipelineConfig",
    "PreconditionError",
    "STAGES",
    "run_all",
    "run_stage",
    "__version__",
]
