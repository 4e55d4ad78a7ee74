"""
Error types shared across the toolkit.

Every failure the toolkit raises on purpose derives from DefletterError so the
CLI can map it to an exit code.
"""


class DefletterError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DefletterError, ValueError):
    """A configuration value is out of range or malformed."""


# glyph-dataset

class UnparseableFont(DefletterError):
    """The font file could not be read as TrueType/OpenType."""


class MissingGlyph(DefletterError):
    """The font has no glyph mapped to the requested letter."""


class EmptyGlyph(DefletterError):
    """The glyph exists but its outline encloses no area."""


class InsufficientFonts(DefletterError):
    """Fewer usable fonts than splits."""


class IoFailure(DefletterError):
    """Reading or writing an artifact failed at the OS level."""


class CorruptDataset(DefletterError):
    """A dataset file is truncated or fails its checksum."""


# training

class DivergedTraining(DefletterError):
    """A loss became NaN or infinite."""


class EmptySplit(DefletterError):
    """A required dataset split has no examples."""


class EmptyClass(DefletterError):
    """A letter class has no usable examples."""


# attack / analysis

class NotCorrectlyClassified(DefletterError):
    """An attack was requested on an image the classifier already gets wrong."""


class EmptyLog(DefletterError):
    """An attack log has no records to aggregate."""


class JoinFailure(DefletterError):
    """An attack record could not be matched back to its original image."""


# pipeline

class MissingArtifact(DefletterError):
    """An upstream artifact a stage depends on does not exist."""


class StaleArtifact(DefletterError):
    """An upstream artifact was produced from inputs that have since changed."""


class ModeCollapseWarning(UserWarning):
    """Generated samples of a class have collapsed to nearly one image."""
