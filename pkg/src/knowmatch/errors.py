"""Exception types shared across the toolkit."""


class KnowmatchError(Exception):
    """Base class for all toolkit errors."""


class FormatError(KnowmatchError):
    """Malformed input file: bad header, ragged row, bad label, bad JSONL line."""


class DuplicateIdError(KnowmatchError):
    """An id (or labeled pair) occurs more than once where uniqueness is required."""


class DanglingReferenceError(KnowmatchError):
    """A pair references an entry id that does not exist in its table."""


class DomainError(KnowmatchError):
    """An argument is outside its valid domain."""


class OverlapError(KnowmatchError):
    """Spans that must be disjoint overlap."""


class AnnotationMismatchError(KnowmatchError):
    """An annotation does not fit the cell it claims to describe."""


class SequenceOverflowError(KnowmatchError):
    """A token sequence cannot be made to fit the length budget."""


class NumericalError(KnowmatchError):
    """A numeric computation produced non-finite values."""


class DegenerateError(KnowmatchError):
    """A statistical test is undefined for the given inputs (zero variance)."""


class IncompatibleArtifactsError(KnowmatchError):
    """Artifacts produced under different vocabularies or configs were mixed."""
