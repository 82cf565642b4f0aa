"""Exception types shared across the engine."""


class CapengineError(Exception):
    """Base class for all engine errors."""


# geometry
class EmptyControl(CapengineError):
    """Visual control carries no usable selection."""


class EmptyMask(CapengineError):
    """Mask has no set pixel where one is required."""


class DimsMismatch(CapengineError):
    """Two rasters/masks that must share dimensions do not."""


class InvalidRle(CapengineError):
    """RLE payload violates the codec invariants."""


class OutOfBounds(CapengineError):
    """Window or coordinate falls outside the image."""


# prompts
class EmptyCategory(CapengineError):
    """Object category is empty after trimming."""


class NoRegions(CapengineError):
    """Paragraph prompt requested with zero region captions."""


# backends
class BackendUnavailable(CapengineError):
    """Backend could not be reached or kept failing after retries."""


class MalformedResponse(CapengineError):
    """Backend response violates the wire schema."""


class NoMask(CapengineError):
    """Segmenter returned zero candidates."""


class EmptyCaption(CapengineError):
    """Captioner returned empty text."""


class Refusal(CapengineError):
    """Refiner response matched a configured refusal marker."""


# pipeline
class NoCandidates(CapengineError):
    """Mask selection invoked with an empty candidate list."""


# chat / service
class SessionBusy(CapengineError):
    """A turn is already in flight for this session."""


class UnknownImage(CapengineError):
    """Referenced image id is not in the store."""


class UnknownSession(CapengineError):
    """Referenced chat session id is not known."""
