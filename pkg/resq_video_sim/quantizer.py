"""Uniform affine symmetric quantization.

    q(x; s, b) = s * clamp(round(x / s), -2**(b-1), 2**(b-1) - 1)

with ``round`` being round-half-to-even and the scale derived from a
symmetric range:

    s = 2 * max(r_max, -r_min) / (2**b - 1)

A 0-bit quantizer maps everything to zero (and costs nothing); a quantizer
with ``bit_width=None`` is the identity, used to switch quantization off.
Per-channel scales apply along the leading extent (output channels of a
weight tensor).
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from resq_video_sim._compat import StrEnum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from resq_video_sim.errors import DegenerateRangeError, DimensionError, QuantParamsError
from resq_video_sim.tensor_core import Tensor, _freeze, conv2d, conv2d_accumulate, sub

# Bits charged for an unquantized operand.
FULL_PRECISION_BITS = 32

# Degenerate (all-zero) ranges get scale = 2**-24 / (2**b - 1).
_DEGENERATE_SCALE_NUMERATOR = 2.0**-24


class Granularity(StrEnum):
    PER_TENSOR = "per-tensor"
    PER_CHANNEL = "per-channel"


def compute_scale(r_max: float, r_min: float, bit_width: int) -> float:
    """Scale factor for the symmetric range ``[r_min, r_max]`` at ``bit_width`` bits."""
    if bit_width < 1:
        raise QuantParamsError("0-bit quantizers have no scale")
    if not r_min <= 0.0 <= r_max:
        raise QuantParamsError(f"Range ({r_min}, {r_max}) must straddle zero")
    if r_max == 0.0 and r_min == 0.0:
        raise DegenerateRangeError("Range is zero on both ends")
    return 2.0 * max(r_max, -r_min) / (2**bit_width - 1)


def derive_scale(r_min: float, r_max: float, bit_width: int) -> float:
    """Like :func:`compute_scale`, mapping a degenerate range to the minimal scale."""
    if r_min == 0.0 and r_max == 0.0:
        return _DEGENERATE_SCALE_NUMERATOR / (2**bit_width - 1)
    return compute_scale(r_max, r_min, bit_width)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantParams:
    """Scale(s), bit-width and the range(s) the scales were derived from."""

    bit_width: int | None
    scales: tuple[float, ...] = ()
    ranges: tuple[tuple[float, float], ...] = ()
    granularity: Granularity = Granularity.PER_TENSOR

    def __post_init__(self) -> None:
        b = self.bit_width
        if b is None or b == 0:
            if self.scales:
                raise QuantParamsError(f"bit_width={b} quantizers carry no scales")
            return
        if b < 0:
            raise QuantParamsError(f"Negative bit width {b}")
        if not self.scales:
            raise QuantParamsError(f"{b}-bit quantizer needs at least one scale")
        if len(self.ranges) != len(self.scales):
            raise QuantParamsError("One range per scale is required")
        if self.granularity is Granularity.PER_TENSOR and len(self.scales) != 1:
            raise QuantParamsError("Per-tensor quantizers hold exactly one scale")
        for s in self.scales:
            if not (s > 0.0 and np.isfinite(s)):
                raise QuantParamsError(f"Scale must be positive and finite, got {s}")
        for r_min, r_max in self.ranges:
            if not r_min <= 0.0 <= r_max:
                raise QuantParamsError(f"Range ({r_min}, {r_max}) must straddle zero")

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_range(cls, r_min: float, r_max: float, bit_width: int) -> QuantParams:
        """Per-tensor parameters with the scale derived from ``[r_min, r_max]``."""
        if bit_width == 0:
            return cls.zero()
        r_min, r_max = float(r_min), float(r_max)
        return cls(
            bit_width=bit_width,
            scales=(derive_scale(r_min, r_max, bit_width),),
            ranges=((r_min, r_max),),
        )

    @classmethod
    def per_channel(
        cls, ranges: Sequence[tuple[float, float]], bit_width: int
    ) -> QuantParams:
        """One scale per output channel, each derived from its own range."""
        if bit_width == 0:
            return cls.zero()
        ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        return cls(
            bit_width=bit_width,
            scales=tuple(derive_scale(lo, hi, bit_width) for lo, hi in ranges),
            ranges=ranges,
            granularity=Granularity.PER_CHANNEL,
        )

    @classmethod
    def from_scale(cls, scale: float, bit_width: int) -> QuantParams:
        """Hand-built grid with step ``scale``; the stored range is implied by it."""
        half_span = scale * (2**bit_width - 1) / 2.0
        return cls(
            bit_width=bit_width,
            scales=(float(scale),),
            ranges=((-half_span, half_span),),
        )

    @classmethod
    def zero(cls) -> QuantParams:
        return cls(bit_width=0)

    @classmethod
    def disabled(cls) -> QuantParams:
        return cls(bit_width=None)

    # -- properties ----------------------------------------------------------

    @property
    def enabled(self) -> bool:
        return self.bit_width is not None

    @property
    def effective_bits(self) -> int:
        """Bit-width charged by BOP accounting."""
        return FULL_PRECISION_BITS if self.bit_width is None else self.bit_width

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bit_width - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bit_width - 1) - 1

    @property
    def scale(self) -> float:
        if len(self.scales) != 1:
            raise QuantParamsError("scale is only defined for per-tensor quantizers")
        return self.scales[0]

    def scale_for(self, x: np.ndarray) -> np.float64 | NDArray[np.float64]:
        """Scale(s) broadcastable against ``x``."""
        if self.granularity is Granularity.PER_TENSOR:
            return np.float64(self.scales[0])
        if x.ndim == 0 or x.shape[0] != len(self.scales):
            raise DimensionError(
                f"Per-channel params have {len(self.scales)} scales but tensor "
                f"leading extent is {x.shape[:1]}"
            )
        return np.asarray(self.scales, dtype=np.float64).reshape(
            (-1,) + (1,) * (x.ndim - 1)
        )

    def is_consistent(self) -> bool:
        """True when every scale is recomputable from its range."""
        if not self.enabled or self.bit_width == 0:
            return True
        return all(
            s == derive_scale(lo, hi, self.bit_width)
            for s, (lo, hi) in zip(self.scales, self.ranges)
        )

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        ranges = [{"min": lo, "max": hi} for lo, hi in self.ranges]
        if self.granularity is Granularity.PER_TENSOR:
            range_field: Any = ranges[0] if ranges else None
        else:
            range_field = ranges
        return {
            "bit_width": self.bit_width,
            "granularity": self.granularity.value,
            "scales": list(self.scales),
            "range": range_field,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> QuantParams:
        raw_range = data.get("range")
        if raw_range is None:
            ranges: tuple[tuple[float, float], ...] = ()
        elif isinstance(raw_range, dict):
            ranges = ((float(raw_range["min"]), float(raw_range["max"])),)
        else:
            ranges = tuple((float(r["min"]), float(r["max"])) for r in raw_range)
        return cls(
            bit_width=data["bit_width"],
            scales=tuple(float(s) for s in data.get("scales", [])),
            ranges=ranges,
            granularity=Granularity(data.get("granularity", Granularity.PER_TENSOR)),
        )


@dataclass(frozen=True)
class QuantizerPool:
    """Activation quantizers ordered by strictly ascending bit-width."""

    entries: tuple[QuantParams, ...]

    def __post_init__(self) -> None:
        if len(self.entries) < 2:
            raise QuantParamsError("A quantizer pool needs at least two entries")
        bits = []
        for entry in self.entries:
            if not entry.enabled:
                raise QuantParamsError("Pool entries must be quantizers")
            bits.append(entry.bit_width)
        if any(lo >= hi for lo, hi in zip(bits, bits[1:])):
            raise QuantParamsError(f"Pool bit widths must ascend strictly, got {bits}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[QuantParams]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> QuantParams:
        return self.entries[index]

    @property
    def bit_widths(self) -> tuple[int, ...]:
        return tuple(entry.bit_width for entry in self.entries)

    @property
    def highest(self) -> QuantParams:
        return self.entries[-1]

    def to_dict(self) -> dict[str, Any]:
        return {"pool": [entry.to_dict() for entry in self.entries]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> QuantizerPool:
        return cls(entries=tuple(QuantParams.from_dict(e) for e in data["pool"]))


def activation_params_from_dict(data: dict[str, Any]) -> QuantParams | QuantizerPool:
    """Decode either a single quantizer or a ``{"pool": [...]}`` document."""
    if "pool" in data:
        return QuantizerPool.from_dict(data)
    return QuantParams.from_dict(data)


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer grid values plus the parameters that dequantize them.

    0-bit tensors keep an empty ``codes`` array and only remember ``shape``.
    """

    codes: NDArray[np.int32]
    params: QuantParams
    shape: tuple[int, ...]


def _codes(x: np.ndarray, params: QuantParams) -> NDArray[np.float64]:
    scaled = x.astype(np.float64) / params.scale_for(x)
    return np.clip(np.rint(scaled), params.qmin, params.qmax)


def fake_quantize(x: ArrayLike, params: QuantParams) -> Tensor:
    """Round ``x`` onto the quantizer grid and map it back to real values."""
    x = np.asarray(x)
    if not params.enabled:
        return _freeze(x)
    if params.bit_width == 0:
        return _freeze(np.zeros(x.shape, dtype=np.float32))
    return _freeze(_codes(x, params) * params.scale_for(x))


def quantize_to_codes(x: ArrayLike, params: QuantParams) -> QuantizedTensor:
    x = np.asarray(x)
    if not params.enabled:
        raise QuantParamsError("Disabled quantizers have no integer representation")
    if params.bit_width == 0:
        return QuantizedTensor(
            codes=np.zeros((0,), dtype=np.int32), params=params, shape=x.shape
        )
    codes = _codes(x, params).astype(np.int32)
    codes.setflags(write=False)
    return QuantizedTensor(codes=codes, params=params, shape=x.shape)


def dequantize(q: QuantizedTensor) -> Tensor:
    if q.params.bit_width == 0:
        return _freeze(np.zeros(q.shape, dtype=np.float32))
    return _freeze(q.codes.astype(np.float64) * q.params.scale_for(q.codes))


def integer_conv2d(qx: QuantizedTensor, qw: QuantizedTensor, padding: int = 0) -> Tensor:
    """Convolve integer codes exactly, then rescale by ``s_a * s_w``.

    Activations must be per-tensor; weights may be per-channel (one scale per
    output channel).
    """
    if qx.params.granularity is not Granularity.PER_TENSOR:
        raise QuantParamsError("Activation codes must use a per-tensor scale")
    if qx.params.bit_width == 0 or qw.params.bit_width == 0:
        x_zero = np.zeros(qx.shape, dtype=np.float32)
        w_zero = np.zeros(qw.shape, dtype=np.float32)
        return conv2d(x_zero, w_zero, padding)

    acc = conv2d_accumulate(qx.codes, qw.codes, padding)
    w_scale = np.asarray(qw.params.scales, dtype=np.float64)
    if qw.params.granularity is Granularity.PER_CHANNEL:
        w_scale = w_scale.reshape(-1, 1, 1)
    else:
        w_scale = w_scale[0]
    return _freeze(acc * (qx.params.scale * w_scale))


# ---------------------------------------------------------------------------
# Error diagnostics
# ---------------------------------------------------------------------------


def weight_quant_error(
    x: ArrayLike, w: ArrayLike, params_w: QuantParams, padding: int = 0
) -> Tensor:
    """Output error caused by quantizing the weights alone."""
    exact = conv2d(x, w, padding)
    approx = conv2d(x, fake_quantize(w, params_w), padding)
    return sub(exact, approx)


def activation_quant_error(x: ArrayLike, params_a: QuantParams) -> Tensor:
    """Per-element rounding and clipping error ``x - q(x)``."""
    return sub(x, fake_quantize(x, params_a))
