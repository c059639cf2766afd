"""Knowledge-augmented entity resolution toolkit.

Pipeline: load paired tables, gather column-type and entity-type
annotations, serialize record pairs with one of three prompting styles
(space, slash, constrained), and classify matches with a small
visibility-masked transformer encoder.
"""

from .errors import (
    AnnotationMismatchError,
    DanglingReferenceError,
    DegenerateError,
    DomainError,
    DuplicateIdError,
    FormatError,
    IncompatibleArtifactsError,
    KnowmatchError,
    NumericalError,
    OverlapError,
    SequenceOverflowError,
)
from .serializer import PromptMode

__version__ = "0.1.0"

__all__ = [
    "AnnotationMismatchError",
    "DanglingReferenceError",
    "DegenerateError",
    "DomainError",
    "DuplicateIdError",
    "FormatError",
    "IncompatibleArtifactsError",
    "KnowmatchError",
    "NumericalError",
    "OverlapError",
    "PromptMode",
    "SequenceOverflowError",
    "__version__",
]
