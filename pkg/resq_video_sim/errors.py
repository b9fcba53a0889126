"""Exception hierarchy shared by every resq_video_sim module."""

from __future__ import annotations


class ResqError(Exception):
    """Base exception for simulator errors."""


class DimensionError(ResqError, ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NonFiniteError(ResqError, ValueError):
    """Raised when a tensor is built from NaN or infinite values."""


class DegenerateRangeError(ResqError, ValueError):
    """Raised when a quantization range collapses to a single point at zero."""


class QuantParamsError(ResqError, ValueError):
    """Raised for inconsistent quantizer parameters."""


class ConfigError(ResqError, ValueError):
    """Raised for out-of-range run settings such as the keyframe period or tau."""


class CalibrationError(ResqError):
    """Raised when calibration data cannot produce a batch."""


class SequencingError(ResqError, RuntimeError):
    """Raised when residual inference runs before any keyframe."""


class NotationError(ResqError, ValueError):
    """Raised for precision strings outside the ``WxAy|WuAv`` grammar."""


class RtfFormatError(ResqError, ValueError):
    """Raised when a Raw Tensor File is truncated or has a bad header."""


class RunCancelled(ResqError):
    """Raised inside a run when cancellation was requested."""
