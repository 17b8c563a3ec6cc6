"""Exception hierarchy shared by the library and the CLI."""


class FusionError(Exception):
    """Base class for every error raised by icafusion."""


class DimensionError(FusionError, ValueError):
    """Tensor or image shapes do not satisfy an operation's contract."""


class ConfigError(FusionError, ValueError):
    """Invalid architecture, training or run configuration."""


class DataError(FusionError):
    """Input images could not be read or do not form a usable dataset."""


class RegistrationError(DataError):
    """An infrared/visible pair does not share the same raster size."""


class NumericalError(FusionError, ArithmeticError):
    """A loss or gradient became non-finite."""


class IntegrityError(FusionError):
    """A checkpoint file is truncated, corrupted or fails its hash check."""


class VersionError(FusionError):
    """A checkpoint or manifest was written by an incompatible format version."""
