"""Exception types shared across the pipeline."""


class CatsgError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(CatsgError, ValueError):
    pass


class UnknownClass(CatsgError, KeyError):
    pass


class ConfigError(CatsgError, ValueError):
    pass


class DimensionMismatch(CatsgError, ValueError):
    pass


class InconsistentDim(DimensionMismatch):
    pass


class EmptyMask(CatsgError, ValueError):
    pass


class MissingMask(CatsgError, ValueError):
    pass


class EmptyDataset(CatsgError, ValueError):
    pass


class ChunkOutOfRange(CatsgError, IndexError):
    pass


class MissingFrame(CatsgError, KeyError):
    pass


class NoQualifyingChunk(CatsgError, ValueError):
    pass


class NonFiniteLoss(CatsgError, FloatingPointError):
    pass


class InvalidWindow(CatsgError, ValueError):
    pass


class EmptySplit(CatsgError, ValueError):
    pass


class AlignmentError(CatsgError, ValueError):
    pass


class LengthMismatch(CatsgError, ValueError):
    pass


class FingerprintMismatch(CatsgError, ValueError):
    """A checkpoint was produced under a different ontology or config."""
