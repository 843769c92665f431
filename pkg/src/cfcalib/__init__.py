"""Car-following model calibration and scenario validation."""

__version__ = "0.1.0"
