"""Exception hierarchy shared by all svgpcr modules."""


class SVGPCRError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SVGPCRError, ValueError):
    """Malformed or non-finite numerical input."""


class ConfigError(SVGPCRError, ValueError):
    """Invalid configuration value."""


class DataError(SVGPCRError, ValueError):
    """Inconsistent dataset, annotation or prediction file."""


class NumericalError(SVGPCRError, ArithmeticError):
    """A factorization or objective evaluation broke down."""


class IntegrityError(SVGPCRError):
    """A serialized file failed its checksum or is truncated."""


class CheckpointVersionError(SVGPCRError):
    """A checkpoint was written by an incompatible format version."""


class TrainingError(SVGPCRError):
    """Training aborted. ``last_good`` holds the model state before the failing step."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
