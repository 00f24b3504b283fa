"""Exception hierarchy shared across the package."""


class RadpipeError(Exception):
    """Base class for all package errors."""


class ValidationError(RadpipeError):
    """A domain-type invariant was violated (names the first violation)."""


class MissingTagError(ValidationError):
    """A required tag key (modality) is absent from a tag set."""


class ConfigError(RadpipeError):
    """Invalid configuration value or combination."""


class EmptyImageError(ValidationError):
    """Image volume has zero voxels."""


class ShapeError(RadpipeError):
    """Array shape does not match the declared contract."""


class BatchTooSmallError(RadpipeError):
    """Contrastive batch needs at least two distinct studies."""


class NoImageError(RadpipeError):
    """Aligner called with an empty image list."""


class EmptyCorpusError(RadpipeError):
    """Vocabulary construction requires at least one text."""


class EmptyTargetError(RadpipeError):
    """Language-model loss mask selects no target positions."""


class MissingPriorError(RadpipeError):
    """Prompt setting requests prior visit data that does not exist."""


class SchemaError(RadpipeError):
    """Serialized record violates a dataset schema."""

    def __init__(self, message, line=None, field=None, kind=None):
        super().__init__(message)
        self.line = line
        self.field = field
        self.kind = kind


class CheckpointMismatchError(RadpipeError):
    """Checkpoint config hash does not match the requested config."""


class LengthMismatchError(RadpipeError):
    """Paired prediction/reference lists differ in length."""


class UnknownStrataError(RadpipeError):
    """Requested stratification key is not supported."""


class UnknownRaterError(RadpipeError):
    """Rater id is not registered with the rating service."""


class UnknownItemError(RadpipeError):
    """Score submitted for an item id the service does not know."""


class RangeError(RadpipeError):
    """Score outside the 1-5 rating scale."""


class MissingDimensionError(RadpipeError):
    """Score card lacks one of the six rating dimensions."""


class NoDataError(RadpipeError):
    """Aggregation requested before any score was submitted."""
