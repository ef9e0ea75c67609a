"""Distribution-free chance-constrained trajectory optimization.

Conformal calibration of contraction/disturbance scores, ellipsoidal
constraint tightening, direct-transcription planning and closed-loop
Monte-Carlo auditing for discrete-time nonlinear systems with additive
non-Gaussian noise.
"""

__version__ = "0.1.0"


class ConfigurationError(ValueError):
    """Invalid dimensions, parameters or configuration values."""


class DesignError(RuntimeError):
    """Controller or metric design failed numerically."""


class InsufficientCalibrationError(RuntimeError):
    """Too few calibration scores for the requested quantile level."""


class NumericalFailure(RuntimeError):
    """A computation produced non-finite values."""
