"""Exception and warning types raised across the package."""


class SvmaxError(Exception):
    pass


class InvalidInput(SvmaxError, ValueError):
    pass


class ShapeError(SvmaxError, ValueError):
    pass


class ZeroVector(SvmaxError, ValueError):
    pass


class StaleCache(SvmaxError, RuntimeError):
    pass


class NormViolation(SvmaxError, ValueError):
    pass


class InsufficientPositives(SvmaxError, ValueError):
    pass


class BatchComposition(SvmaxError, ValueError):
    pass


class DegenerateBounds(SvmaxError, ValueError):
    pass


class FormatError(SvmaxError, ValueError):
    pass


class TruncatedFile(FormatError):
    pass


class InvalidK(SvmaxError, ValueError):
    pass


class ConfigError(SvmaxError, ValueError):
    pass


class MissingData(SvmaxError, FileNotFoundError):
    pass


class DegenerateSpectrumWarning(UserWarning):
    """Singular values are repeated or (near) zero; the gradient is a subgradient."""
