"""Fast functional emulation and calibration with scaled-input local Gaussian processes."""

__version__ = "0.1.0"
