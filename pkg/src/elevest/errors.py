"""Exception types shared across the package."""


class ElevestError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ElevestError):
    """An input violates a documented invariant or precondition."""


class ManifestError(ElevestError):
    """Malformed manifest or predictions content.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class OutOfBoundsError(ElevestError):
    """A query point falls outside the extent of a grid."""


class MissingDataError(ElevestError):
    """A computation touched a missing-data sentinel value."""


class FeatureFileError(ElevestError):
    """A feature, vocabulary, index, or model file failed to parse."""


class DegenerateDescriptorError(ElevestError):
    """A descriptor with no energy cannot be normalized."""


class EmptyImageError(ElevestError):
    """An image without local features cannot be encoded."""


class NoEstimateError(ElevestError):
    """No estimator was able to produce an elevation for the query."""
