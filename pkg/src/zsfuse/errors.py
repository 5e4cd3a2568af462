"""Exception hierarchy shared by every zsfuse module."""

from __future__ import annotations


class ZsfuseError(Exception):
    """Base class for all errors raised by zsfuse."""


# -- vector math -------------------------------------------------------------


class ZeroVectorError(ZsfuseError, ValueError):
    """A vector's norm is too small to normalize (degenerate backend output)."""


class DimMismatchError(ZsfuseError, ValueError):
    """Two vectors or a vector and a matrix disagree on dimensionality."""


class EmptyScoresError(ZsfuseError, ValueError):
    """Argmax requested over an empty score vector."""


class InvalidVectorError(ZsfuseError, ValueError):
    """A vector is empty, not one-dimensional, or contains NaN/Inf."""


# -- prompts / labels --------------------------------------------------------


class EmptyLabelSetError(ZsfuseError, ValueError):
    pass


class EmptyLabelError(ZsfuseError, ValueError):
    pass


class DuplicateLabelError(ZsfuseError, ValueError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"duplicate class label: {label!r}")


# -- backends ----------------------------------------------------------------


class BackendError(ZsfuseError):
    """Base for failures talking to an encoder or LLM."""


class TransportError(BackendError):
    """Network-level failure (connection refused, timeout, ...)."""


class ProtocolError(BackendError):
    """The service answered, but the response is malformed."""


class RemoteError(BackendError):
    """The service reported a failure."""

    def __init__(self, message: str, status_code: int | None = None):
        self.status_code = status_code
        super().__init__(message)


class TooLongError(RemoteError):
    """The service rejected the input as exceeding its budget."""


class TooShortError(BackendError, ValueError):
    """Text is empty after whitespace trimming."""


class SafetyRefusalError(RemoteError):
    """The LLM declined to answer (safety block)."""


class StoreCorruptError(ZsfuseError):
    """A cache entry's bytes no longer match their recorded digest."""


class PartialGenerationError(BackendError):
    """Fewer class descriptions were obtained than requested."""

    def __init__(self, label: str, failed_prompts: list[int], obtained: int, requested: int):
        self.label = label
        self.failed_prompts = failed_prompts
        self.obtained = obtained
        self.requested = requested
        super().__init__(
            f"{label!r}: obtained {obtained}/{requested} descriptions; "
            f"failed prompt numbers {failed_prompts}"
        )


# -- pipeline ----------------------------------------------------------------


class ImageDecodeError(ZsfuseError, ValueError):
    pass


class NoFeaturesAvailableError(ZsfuseError):
    """Every selected query feature failed."""


class DegenerateImageError(ZsfuseError, ValueError):
    """Image is smaller than the smallest attribution kernel."""


# -- evaluation --------------------------------------------------------------


class ManifestError(ZsfuseError, ValueError):
    """Manifest cannot be read or parsed."""


class MissingImageError(ManifestError):
    pass


class IndexOutOfRangeError(ManifestError):
    pass


class EmptyPredictionsError(ZsfuseError, ValueError):
    pass


class EmptyMatrixError(ZsfuseError, ValueError):
    pass


class EvaluationFailedError(ZsfuseError):
    """Too many per-record failures for the configured tolerance."""


class ModelFormatError(ZsfuseError, ValueError):
    """A serialized classifier file is malformed."""
