"""Exception types shared across the toolkit.

Every error raised by slidemil derives from SlideMilError so callers can
catch toolkit failures without masking programming errors (TypeError etc.).
"""


class SlideMilError(Exception):
    """Base class for all slidemil errors."""


# --- dataset index / feature-bag I/O ---

class DuplicateSlideId(SlideMilError):
    pass


class UnknownClass(SlideMilError):
    pass


class EmptyIndex(SlideMilError):
    pass


class TooFewPatients(SlideMilError):
    pass


class BadMagic(SlideMilError):
    pass


class UnsupportedVersion(SlideMilError):
    pass


class TruncatedFile(SlideMilError):
    pass


class NonFiniteFeature(SlideMilError):
    pass


class InvalidSpec(SlideMilError):
    pass


# --- preprocessing ---

class EmptyTissue(SlideMilError):
    pass


class UnreadableImage(SlideMilError):
    pass


class MagnificationUnavailable(SlideMilError):
    pass


class EmptyManifest(SlideMilError):
    pass


class OutOfBounds(SlideMilError):
    pass


# --- encoders ---

class WeightsNotFound(SlideMilError):
    pass


class DimMismatch(SlideMilError):
    pass


class UnknownEncoder(SlideMilError):
    pass


# --- models ---

class EmptyBag(SlideMilError):
    pass


class ShapeMismatch(SlideMilError):
    pass


class NonFinite(SlideMilError):
    pass


class NotSquare(SlideMilError):
    pass


# --- training ---

class EmptyClass(SlideMilError):
    pass


class NonFiniteLoss(SlideMilError):
    pass


# --- evaluation ---

class EmptyTestSet(SlideMilError):
    pass


class AllOneClass(SlideMilError):
    pass


class EmptyGroup(SlideMilError):
    pass


class DegenerateClassWarning(UserWarning):
    """Warned when a class absent from the test set is skipped in macro AUC."""


# --- experiment runner ---

class MissingBags(SlideMilError):
    pass


class EncoderMismatch(SlideMilError):
    pass
