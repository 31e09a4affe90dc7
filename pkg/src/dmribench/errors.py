"""Exception hierarchy shared by all dmribench modules."""


class DmriError(Exception):
    """Base class for every error raised by dmribench."""


# --- volume I/O -------------------------------------------------------------

class NiftiError(DmriError, ValueError):
    """Problem decoding or encoding a NIfTI-1 file.

    ``field`` names the header field (or payload) that caused the failure.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class MalformedHeader(NiftiError):
    pass


class UnsupportedMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedPayload(NiftiError):
    pass


class DimOverflow(NiftiError):
    pass


class NonFiniteData(NiftiError):
    pass


class GradientError(DmriError, ValueError):
    pass


class BadRowCount(GradientError):
    pass


class LengthMismatch(GradientError):
    pass


class NonNumericToken(GradientError):
    pass


class NonUnitDirection(GradientError):
    pass


class NoB0Volumes(DmriError, ValueError):
    pass


class GridMismatch(DmriError, ValueError):
    pass


# --- design / fitting ---------------------------------------------------------

class RankDeficient(DmriError, ArithmeticError):
    pass


class InsufficientDirections(DmriError, ValueError):
    pass


class SingularDesign(DmriError, ArithmeticError):
    pass


class UnderdeterminedWithoutRegularization(DmriError, ValueError):
    pass


class EmptyMask(DmriError, ValueError):
    pass


class EmptyDistribution(DmriError, ValueError):
    pass


# --- statistics ---------------------------------------------------------------

class ZeroVarianceRegion(DmriError, ValueError):
    def __init__(self, region):
        super().__init__(f"region {region!r} has zero variance across subjects")
        self.region = region


class RegionMismatch(DmriError, ValueError):
    pass


class ZeroMeanPair(DmriError, ZeroDivisionError):
    pass


# --- phantoms / pipeline ------------------------------------------------------

class PhantomSpecError(DmriError, ValueError):
    pass


class RegionConflict(PhantomSpecError):
    pass


class ExternalDenoiserFailed(DmriError, RuntimeError):
    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class ExternalDenoiserTimeout(ExternalDenoiserFailed):
    pass


class PipelineError(DmriError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


class PatchLargerThanVolume(DmriError, ValueError):
    pass


class TooFewSamples(DmriError, ValueError):
    pass
