"""Dense tensor arithmetic and the stride-1 convolution primitive.

Tensors are plain ``numpy`` float32 arrays laid out as (C, H, W) with an
optional leading batch extent; weights are (C_out, C_in, kH, kW).
``as_tensor`` is the public constructor: it casts to float32, rejects
non-finite values and marks the buffer read-only, so tensors behave as
immutable values that can be shared across threads.

Arithmetic accumulates in float64 and stores float32 results.

Raw Tensor File (RTF) layout, little-endian::

    b"RTF1" | u32 rank | rank x u32 extents | prod(extents) x f32 (row-major)
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray

from resq_video_sim.errors import DimensionError, NonFiniteError, RtfFormatError

Tensor = NDArray[np.float32]

RTF_MAGIC = b"RTF1"


def as_tensor(values: ArrayLike) -> Tensor:
    """Build an immutable float32 tensor from array-like ``values``."""
    arr = np.array(values, dtype=np.float32)
    if arr.ndim == 0:
        raise DimensionError("Tensors need at least one extent")
    if 0 in arr.shape:
        raise DimensionError(f"Tensor extents must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("Tensor contains NaN or infinite values")
    arr.setflags(write=False)
    return arr


def _freeze(arr: np.ndarray) -> Tensor:
    """Cast an internally computed result to float32 and make it read-only."""
    out = np.asarray(arr, dtype=np.float32)
    if out.base is not None or not out.flags.owndata:
        out = out.copy()
    out.setflags(write=False)
    return out


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"Shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d(x: ArrayLike, w: ArrayLike, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``w``.

    Output extents are ``H + 2*padding - kH + 1`` by ``W + 2*padding - kW + 1``.
    """
    return _freeze(conv2d_accumulate(x, w, padding))


def conv2d_accumulate(
    x: ArrayLike, w: ArrayLike, padding: int = 0
) -> NDArray[np.float64]:
    """Same as :func:`conv2d` but returns the float64 accumulator.

    Integer-valued operands (quantization codes) stay exact here.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if w.ndim != 4:
        raise DimensionError(f"Weights must have 4 extents, got {w.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"Input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if x.shape[-3] != w.shape[1]:
        raise DimensionError(
            f"Input has {x.shape[-3]} channels but weights expect {w.shape[1]}"
        )
    if padding < 0:
        raise DimensionError(f"Padding must be non-negative, got {padding}")

    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[-2] + 2 * padding or kw > x.shape[-1] + 2 * padding:
        raise DimensionError(
            f"Kernel {kh}x{kw} exceeds padded input {x.shape[-2:]} (padding {padding})"
        )

    pad_width = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    padded = np.pad(x.astype(np.float64), pad_width)
    windows = sliding_window_view(padded, (kh, kw), axis=(-2, -1))
    return np.einsum(
        "...chwij,ocij->...ohw", windows, w.astype(np.float64), optimize=True
    )


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise ``a - b``."""
    a, b = np.asarray(a), np.asarray(b)
    _require_same_shape(a, b)
    return _freeze(a.astype(np.float64) - b.astype(np.float64))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise ``a + b``."""
    a, b = np.asarray(a), np.asarray(b)
    _require_same_shape(a, b)
    return _freeze(a.astype(np.float64) + b.astype(np.float64))


def relu(x: ArrayLike) -> Tensor:
    return _freeze(np.maximum(np.asarray(x, dtype=np.float32), np.float32(0.0)))


# ---------------------------------------------------------------------------
# Norms and statistics
# ---------------------------------------------------------------------------


def channel_norm_map(x: ArrayLike) -> Tensor:
    """Euclidean norm over the channel extent at every pixel.

    (C,H,W) -> (H,W); a leading batch extent is preserved.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise DimensionError(f"Expected (C,H,W) input, got {x.shape}")
    return _freeze(np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=-3)))


def frobenius_norm(x: ArrayLike) -> float:
    x = np.asarray(x)
    if x.size == 0:
        raise DimensionError("Norm of an empty tensor")
    return float(np.sqrt(np.sum(np.square(x, dtype=np.float64))))


def variance(x: ArrayLike) -> float:
    """Population variance over every element."""
    x = np.asarray(x)
    if x.size == 0:
        raise DimensionError("Variance of an empty tensor")
    return float(np.var(x, dtype=np.float64))


def mse(a: ArrayLike, b: ArrayLike) -> float:
    """Mean squared difference, used as the output-quality proxy."""
    a, b = np.asarray(a), np.asarray(b)
    _require_same_shape(a, b)
    return float(np.mean(np.square(a.astype(np.float64) - b.astype(np.float64))))


# ---------------------------------------------------------------------------
# Raw Tensor Files
# ---------------------------------------------------------------------------


def write_rtf(path: str | Path, tensor: ArrayLike) -> None:
    """Serialize ``tensor`` to ``path`` in RTF format."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    header = RTF_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_rtf(path: str | Path) -> Tensor:
    """Load an RTF file written by :func:`write_rtf`."""
    raw = Path(path).read_bytes()
    if raw[:4] != RTF_MAGIC:
        raise RtfFormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        (rank,) = struct.unpack_from("<I", raw, 4)
        extents = struct.unpack_from(f"<{rank}I", raw, 8)
    except struct.error as exc:
        raise RtfFormatError(f"{path}: truncated header") from exc

    offset = 8 + 4 * rank
    count = math.prod(extents)
    if len(raw) - offset != 4 * count:
        raise RtfFormatError(
            f"{path}: expected {count} values, found {(len(raw) - offset) // 4}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return as_tensor(data.reshape(extents))
