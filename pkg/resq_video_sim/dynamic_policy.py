"""Per-pixel bit-width selection for residual activations.

For each pool entry the output error caused by quantizing the residual is
estimated without a convolution, using the pixel-wise bound

    || (delta - q(delta)) * w_hat || <= || delta - q(delta) ||_channels * ||w_hat||_F

Scanning entries from the lowest precision, a pixel settles on the first
entry whose error is within ``tau`` of the next one; pixels that never settle
take the highest precision.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from resq_video_sim.engine import ResidualState, residual_layer, update_reference
from resq_video_sim.errors import (
    ConfigError,
    DimensionError,
    QuantParamsError,
    SequencingError,
)
from resq_video_sim.model import ModelSpec, WeightSet
from resq_video_sim.quantizer import QuantizerPool, QuantParams, fake_quantize
from resq_video_sim.tensor_core import (
    Tensor,
    _freeze,
    as_tensor,
    channel_norm_map,
    conv2d,
    frobenius_norm,
    sub,
)

__all__ = [
    "IndexMap",
    "PolicyConfig",
    "QuantizerPool",
    "approx_error_map",
    "dynamic_residual_forward",
    "exact_error_map",
    "mixed_quantize",
    "select_bitwidths",
    "write_pgm",
]

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.0003


@dataclass(frozen=True)
class PolicyConfig:
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if np.isnan(self.tau):
            raise ConfigError("tau must be a number")


@dataclass(frozen=True, eq=False)
class IndexMap:
    """1-based pool index per pixel."""

    indices: NDArray[np.int64]
    pool_size: int

    def __post_init__(self) -> None:
        if self.indices.ndim != 2:
            raise DimensionError(f"Index maps are 2-D, got {self.indices.shape}")
        if self.indices.size and (
            self.indices.min() < 1 or self.indices.max() > self.pool_size
        ):
            raise DimensionError(f"Indices must lie in 1..{self.pool_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape

    def bit_map(self, pool: QuantizerPool) -> NDArray[np.int64]:
        """Selected bit-width at every pixel."""
        return np.asarray(pool.bit_widths, dtype=np.int64)[self.indices - 1]

    def mean_bits(self, pool: QuantizerPool, mask: np.ndarray | None = None) -> float:
        bits = self.bit_map(pool)
        if mask is not None:
            bits = bits[np.asarray(mask, dtype=bool)]
        return float(bits.mean()) if bits.size else float("nan")


# ---------------------------------------------------------------------------
# Error maps
# ---------------------------------------------------------------------------


def exact_error_map(
    delta: Tensor, w_hat: Tensor, entry: QuantParams, padding: int = 0
) -> Tensor:
    """Channel norm of the output error caused by quantizing ``delta``."""
    residual_error = sub(delta, fake_quantize(delta, entry))
    return channel_norm_map(conv2d(residual_error, w_hat, padding))


def approx_error_map(delta: Tensor, w_hat: Tensor, entry: QuantParams) -> Tensor:
    """Convolution-free upper estimate of :func:`exact_error_map`."""
    residual_error = sub(delta, fake_quantize(delta, entry))
    return _freeze(channel_norm_map(residual_error) * np.float64(frobenius_norm(w_hat)))


def select_bitwidths(maps: Sequence[np.ndarray], tau: float) -> IndexMap:
    """Lowest pool index whose error is within ``tau`` of the next entry's."""
    if len(maps) < 2:
        raise DimensionError("Selection needs error maps for at least two entries")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"Error maps differ in shape: {sorted(shapes)}")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    if stack.ndim != 3:
        raise DimensionError(f"Error maps must be 2-D, got {stack.shape[1:]}")

    settled = (stack[:-1] - stack[1:]) < tau
    first = np.argmax(settled, axis=0)
    indices = np.where(settled.any(axis=0), first + 1, len(maps))
    return IndexMap(indices.astype(np.int64), len(maps))


def mixed_quantize(delta: Tensor, pool: QuantizerPool, index_map: IndexMap) -> Tensor:
    """Quantize every pixel's channel vector with its selected pool entry."""
    delta = np.asarray(delta)
    if delta.shape[-2:] != index_map.shape:
        raise DimensionError(
            f"Index map {index_map.shape} does not match residual grid {delta.shape[-2:]}"
        )
    if index_map.pool_size != len(pool):
        raise DimensionError("Index map was built for a different pool")
    out = np.zeros(delta.shape, dtype=np.float32)
    for i, entry in enumerate(pool, start=1):
        selected = index_map.indices == i
        if selected.any():
            out[..., selected] = fake_quantize(delta, entry)[..., selected]
    return _freeze(out)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _require_pool(model: ModelSpec, index: int) -> QuantizerPool:
    layer = model.layers[index]
    pool = layer.require_quant().residual_act
    if not isinstance(pool, QuantizerPool):
        raise QuantParamsError(f"Layer {index} has no residual quantizer pool")
    if not layer.same_padding:
        raise DimensionError(
            f"Layer {index} needs same padding for per-pixel precision"
        )
    return pool


def dynamic_residual_forward(
    model: ModelSpec,
    x: Tensor,
    state: ResidualState,
    policy: PolicyConfig | None = None,
) -> tuple[Tensor, list[IndexMap]]:
    """Residual pass with the activation pool selected per pixel."""
    policy = policy or PolicyConfig()
    if not state.initialized:
        raise SequencingError("Residual frame before any keyframe")
    h = as_tensor(x)
    maps: list[IndexMap] = []
    deltas: list[Tensor] = []
    for i, layer in enumerate(model.layers):
        pool = _require_pool(model, i)
        # the bias channel carries no residual, so only data taps enter the norm
        w_hat = layer.quantized_weight(WeightSet.RESIDUAL)[:, : layer.in_channels]
        chosen: list[IndexMap] = []

        def quantize(
            delta: Tensor, pool: QuantizerPool = pool, w_hat: Tensor = w_hat
        ) -> Tensor:
            error_maps = [approx_error_map(delta, w_hat, entry) for entry in pool]
            index_map = select_bitwidths(error_maps, policy.tau)
            chosen.append(index_map)
            return mixed_quantize(delta, pool, index_map)

        x_in = h
        h, z, delta = residual_layer(layer, x_in, state.reference(i), quantize)
        update_reference(state, i, x_in, z)
        maps.append(chosen[0])
        deltas.append(delta)
        logger.debug(
            "Layer %d policy: mean bits %.2f", i, chosen[0].mean_bits(pool)
        )
    state.last_deltas = deltas
    return h, maps


# ---------------------------------------------------------------------------
# Policy map images
# ---------------------------------------------------------------------------


def write_pgm(path: str | Path, values: np.ndarray, max_value: int | None = None) -> None:
    """Write a binary (P5) 8-bit portable graymap."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise DimensionError(f"PGM images are 2-D, got {values.shape}")
    max_value = int(values.max()) if max_value is None else max_value
    max_value = max(1, min(255, max_value))
    pixels = np.clip(values, 0, max_value).astype(np.uint8)
    height, width = values.shape
    header = f"P5\n{width} {height}\n{max_value}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + pixels.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path: str | Path) -> NDArray[np.uint8]:
    raw = Path(path).read_bytes()
    match = _PGM_HEADER.match(raw)
    if match is None:
        raise ValueError(f"{path}: not a binary PGM")
    width, height = int(match.group(1)), int(match.group(2))
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=match.end())
    return data.reshape(height, width)
