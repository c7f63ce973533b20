"""Exception hierarchy shared by every module."""


class DepictError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DepictError, ValueError):
    pass


class NonFinite(DepictError, ValueError):
    pass


class NotSymmetric(DepictError, ValueError):
    pass


class NotPositiveDefinite(DepictError, ValueError):
    pass


class NoConvergence(DepictError, RuntimeError):
    pass


class RankDeficient(DepictError, ValueError):
    pass


class CountMismatch(DepictError, ValueError):
    pass


class ResourceCap(DepictError, MemoryError):
    pass


class LabelOutOfRange(DepictError, ValueError):
    pass


class CycleDetected(DepictError, RuntimeError):
    pass


class UnsupportedOp(DepictError, TypeError):
    pass


class Divergence(DepictError, FloatingPointError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ConfigInvalid(DepictError, ValueError):
    pass


class FormatError(DepictError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ShapeCorrupt(FormatError):
    pass


class TooManyClasses(DepictError, ValueError):
    pass
