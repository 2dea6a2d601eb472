"""Exception types shared across the package."""


class DoseDiffError(Exception):
    """Base class for all package-specific failures."""


class FormatError(DoseDiffError):
    """A binary container (volume, mask, checkpoint) is malformed."""


class ConfigError(DoseDiffError):
    """An experiment configuration is invalid or inconsistent."""


class CalibrationError(DoseDiffError):
    """Boundary calibration produced an unusable result."""


class TrainingDiverged(DoseDiffError):
    """The training loss exceeded the divergence guard or went non-finite."""


class SamplingError(DoseDiffError):
    """The reverse process produced a non-finite state."""
