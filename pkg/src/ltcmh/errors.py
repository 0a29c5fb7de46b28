"""Exception types shared across the package."""


class LtcmhError(Exception):
    """Base class for package errors."""


class ShapeError(LtcmhError):
    """Operands have incompatible shapes; message reports both shapes."""


class FormatError(LtcmhError):
    """A binary file is malformed; message reports the byte offset."""


class ConfigError(LtcmhError):
    """A configuration value or combination is invalid."""


class TrainingError(LtcmhError):
    """Training hit a non-finite value or diverged."""


class EvaluationError(LtcmhError):
    """Retrieval evaluation was asked to run on unusable inputs."""
