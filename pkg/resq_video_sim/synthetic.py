"""Synthetic clips and toy convolutional models.

Clips are deterministic given their seed.  Every pattern moves by a fixed
amount per frame (``magnitude``; 0 gives a static scene) and the generator
emits, per frame, a mask of the pixels whose noiseless value changed since the
previous frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from resq_video_sim._compat import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from resq_video_sim.errors import DimensionError
from resq_video_sim.model import ConvLayer, ModelSpec, Nonlinearity
from resq_video_sim.tensor_core import Tensor, as_tensor, read_rtf, write_rtf

logger = logging.getLogger(__name__)

BACKGROUND = 0.2
FOREGROUND = 1.0


class Pattern(StrEnum):
    TRANSLATING_SQUARE = "translating-square"
    TRANSLATING_TEXTURE = "translating-texture"
    ROTATING_BARS = "rotating-bars"
    WHITE_NOISE = "white-noise"


class SyntheticClipSpec(BaseModel):
    """Parameters of one synthetic clip.

    ``magnitude`` is pixels per frame for the translating patterns and degrees
    per frame for ``rotating-bars``; ``white-noise`` ignores it.
    """

    model_config = ConfigDict(frozen=True)

    height: int = Field(default=32, ge=1, le=512)
    width: int = Field(default=32, ge=1, le=512)
    channels: int = Field(default=1, ge=1)
    length: int = Field(default=8, ge=1)
    pattern: Pattern = Pattern.TRANSLATING_SQUARE
    magnitude: float = Field(default=1.0, ge=0.0)
    noise: float = Field(default=0.0, ge=0.0)
    seed: int = 0


class ToyModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    depth: int = Field(default=3, ge=1, le=8)
    channels: int = Field(default=8, ge=1)
    kernel: int = Field(default=3, ge=1)
    seed: int = 0
    in_channels: int | None = Field(default=None, ge=1)
    identity: bool = False
    bias: bool = False


@dataclass(frozen=True)
class SyntheticClip:
    frames: list[Tensor]
    masks: list[NDArray[np.bool_]]
    clean_frames: list[NDArray[np.float64]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def changed_since(self, keyframe: int, t: int) -> NDArray[np.bool_]:
        """Pixels whose noiseless value differs between frames ``keyframe`` and ``t``."""
        a, b = self.clean_frames[keyframe], self.clean_frames[t]
        return np.any(a != b, axis=0)


# ---------------------------------------------------------------------------
# Patterns
# ---------------------------------------------------------------------------


def square_side(spec: SyntheticClipSpec) -> int:
    return max(4, min(spec.height, spec.width) // 4)


def _shift(spec: SyntheticClipSpec, t: int) -> int:
    return int(round(spec.magnitude * t))


def _translating_square(spec: SyntheticClipSpec, t: int) -> np.ndarray:
    side = min(square_side(spec), spec.height, spec.width)
    frame = np.full((spec.height, spec.width), BACKGROUND, dtype=np.float64)
    top = (spec.height - side) // 2
    frame[top : top + side, :side] = FOREGROUND
    return np.roll(frame, _shift(spec, t), axis=1)


def _texture_base(spec: SyntheticClipSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    base = np.zeros((spec.height, spec.width))
    for _ in range(3):
        fy, fx = rng.integers(1, 4, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        angle = 2.0 * np.pi * (fx * xx / spec.width + fy * yy / spec.height)
        base += np.sin(angle + phase)
    lo, hi = base.min(), base.max()
    return (base - lo) / (hi - lo) if hi > lo else np.zeros_like(base)


def _rotating_bars(spec: SyntheticClipSpec, t: int) -> np.ndarray:
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    yy -= (spec.height - 1) / 2.0
    xx -= (spec.width - 1) / 2.0
    theta = np.deg2rad(spec.magnitude * t)
    period = max(4.0, min(spec.height, spec.width) / 4.0)
    phase = (xx * np.cos(theta) + yy * np.sin(theta)) / period
    return np.where(np.floor(phase) % 2 == 0, FOREGROUND, BACKGROUND)


def generate_clip(spec: SyntheticClipSpec) -> SyntheticClip:
    """Frames of shape (channels, height, width) plus per-frame motion masks."""
    rng = np.random.default_rng(spec.seed)
    gains = (
        np.ones(spec.channels)
        if spec.channels == 1
        else rng.uniform(0.5, 1.5, size=spec.channels)
    )
    texture = None
    if spec.pattern is Pattern.TRANSLATING_TEXTURE:
        texture = _texture_base(spec, rng)

    clean: list[np.ndarray] = []
    for t in range(spec.length):
        if spec.pattern is Pattern.TRANSLATING_SQUARE:
            base = _translating_square(spec, t)
        elif spec.pattern is Pattern.TRANSLATING_TEXTURE:
            base = np.roll(texture, _shift(spec, t), axis=1)
        elif spec.pattern is Pattern.ROTATING_BARS:
            base = _rotating_bars(spec, t)
        else:
            base = rng.uniform(0.0, 1.0, size=(spec.height, spec.width))
        clean.append(gains[:, None, None] * base[None, :, :])

    frames = []
    masks = []
    for t, frame in enumerate(clean):
        if t == 0:
            masks.append(np.zeros((spec.height, spec.width), dtype=bool))
        else:
            masks.append(np.any(frame != clean[t - 1], axis=0))
        if spec.noise > 0.0:
            frame = frame + rng.normal(0.0, spec.noise, size=frame.shape)
        frames.append(as_tensor(frame))
    logger.debug(
        "Generated %s clip (%d frames, seed %d)", spec.pattern, spec.length, spec.seed
    )
    return SyntheticClip(frames, masks, clean)


def generate_clips(spec: SyntheticClipSpec, count: int) -> list[SyntheticClip]:
    """``count`` clips with consecutive seeds starting at ``spec.seed``."""
    return [
        generate_clip(spec.model_copy(update={"seed": spec.seed + i}))
        for i in range(count)
    ]


def save_clip(path: str | Path, clip: SyntheticClip | list[Tensor]) -> None:
    """Store a clip as one (T, C, H, W) Raw Tensor File."""
    frames = clip.frames if isinstance(clip, SyntheticClip) else clip
    write_rtf(path, np.stack(frames))


def load_clip(path: str | Path) -> list[Tensor]:
    data = read_rtf(path)
    if data.ndim == 3:
        return [data]
    if data.ndim != 4:
        raise DimensionError(f"{path}: clips are (T, C, H, W), got {data.shape}")
    return [as_tensor(frame) for frame in data]


def load_clip_dir(directory: str | Path) -> list[list[Tensor]]:
    paths = sorted(Path(directory).glob("*.rtf"))
    return [load_clip(p) for p in paths if not p.stem.endswith("_mask")]


# ---------------------------------------------------------------------------
# Toy models
# ---------------------------------------------------------------------------


def build_toy_model(
    depth: int = 3,
    channels: int = 8,
    kernel: int = 3,
    seed: int = 0,
    in_channels: int | None = None,
    identity: bool = False,
    bias: bool = False,
) -> ModelSpec:
    """Random same-padded conv stack with ReLU between layers.

    Weights are zero-mean Gaussian with He variance ``2 / fan_in``;
    ``identity`` builds delta kernels instead.
    """
    if kernel % 2 == 0:
        raise DimensionError(f"Same padding needs an odd kernel, got {kernel}")
    rng = np.random.default_rng(seed)
    c_in = channels if in_channels is None else in_channels
    layers = []
    for i in range(depth):
        if identity:
            if c_in != channels:
                raise DimensionError("Identity layers need equal in/out channels")
            weight = np.zeros((channels, c_in, kernel, kernel))
            diag = np.arange(channels)
            weight[diag, diag, kernel // 2, kernel // 2] = 1.0
        else:
            fan_in = c_in * kernel * kernel
            std = np.sqrt(2.0 / fan_in)
            weight = rng.normal(0.0, std, size=(channels, c_in, kernel, kernel))
        layer_bias = as_tensor(rng.normal(0.0, 0.1, size=channels)) if bias else None
        layers.append(
            ConvLayer(
                weight=as_tensor(weight),
                padding=kernel // 2,
                nonlinearity=Nonlinearity.RELU if i < depth - 1 else Nonlinearity.NONE,
                bias=layer_bias,
                name=f"conv{i}",
            )
        )
        c_in = channels
    return ModelSpec(tuple(layers))


def build_from_spec(spec: ToyModelSpec) -> ModelSpec:
    return build_toy_model(**spec.model_dump())
