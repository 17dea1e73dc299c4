"""Exception hierarchy shared by all cpstrack modules."""


class CpsTrackError(Exception):
    """Base class for every error raised by this package."""


# -- file formats ----------------------------------------------------------

class FormatError(CpsTrackError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


class DimensionCapExceeded(FormatError):
    pass


class ZeroVector(FormatError):
    pass


class NotNormalized(FormatError):
    pass


class ManifestError(FormatError):
    pass


class IoFailure(CpsTrackError, OSError):
    pass


# -- kernels / matching ----------------------------------------------------

class DimMismatch(CpsTrackError, ValueError):
    pass


class EmptyMatrix(CpsTrackError, ValueError):
    pass


class NoPairs(CpsTrackError, LookupError):
    """No cycle pair landed on this object in the current frame."""


# -- memory ----------------------------------------------------------------

class CapacityTooSmall(CpsTrackError, ValueError):
    pass


class InsertionOverflow(CpsTrackError, RuntimeError):
    pass


class NothingEvictable(CpsTrackError, RuntimeError):
    pass


class EmptyBank(CpsTrackError, LookupError):
    pass


class IndexOutOfRange(CpsTrackError, IndexError):
    pass


# -- segmentation ----------------------------------------------------------

class OutOfBounds(CpsTrackError, IndexError):
    pass


class EmptyMask(CpsTrackError, RuntimeError):
    """No patch passed the similarity threshold for this prompt."""


# -- tracking / synthesis / config -----------------------------------------

class NoObjectsDetected(UserWarning):
    """Issued (not raised) when a session starts with zero objects."""


class InfeasibleSpec(CpsTrackError, ValueError):
    pass


class ConfigError(CpsTrackError, ValueError):
    pass
