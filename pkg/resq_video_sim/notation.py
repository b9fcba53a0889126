"""Mixed precision notation.

    W8A8|W8A4        keyframe weights/activations | residual weights/activations
    W8A4             one precision for every frame (frame-quantization baseline)
    W8A8|W8A{0,4,8}  residual activations drawn from a quantizer pool
    FP32             quantization disabled
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from resq_video_sim.errors import NotationError

_PART = re.compile(r"^W(\d+)A(?:(\d+)|\{(\d+(?:,\d+)+)\})$")


@dataclass(frozen=True)
class PrecisionConfig:
    """Bit-widths for both quantizer sets; ``None`` means full precision."""

    keyframe_weight_bits: int | None
    keyframe_act_bits: int | None
    residual_weight_bits: int | None
    residual_act_bits: tuple[int, ...] | None

    @property
    def is_full_precision(self) -> bool:
        return self.keyframe_weight_bits is None

    @property
    def uses_pool(self) -> bool:
        return self.residual_act_bits is not None and len(self.residual_act_bits) > 1


FULL_PRECISION = PrecisionConfig(None, None, None, None)


def _parse_part(text: str, *, residual: bool) -> tuple[int, tuple[int, ...]]:
    match = _PART.match(text.strip())
    if match is None:
        raise NotationError(f"Cannot parse precision {text!r}")
    w_bits = int(match.group(1))
    if match.group(2) is not None:
        acts = (int(match.group(2)),)
    else:
        if not residual:
            raise NotationError(f"Keyframe precision {text!r} cannot use a pool")
        acts = tuple(int(v) for v in match.group(3).split(","))
        if any(lo >= hi for lo, hi in zip(acts, acts[1:])):
            raise NotationError(f"Pool bit widths must ascend strictly in {text!r}")
    if w_bits < 1:
        raise NotationError(f"Weight bit width must be at least 1 in {text!r}")
    # a 0-bit residual skips the residual convolution; keyframes need real bits
    if not residual and acts[0] < 1:
        raise NotationError(f"Keyframe activation bit width must be at least 1 in {text!r}")
    return w_bits, acts


def parse_precision(text: str) -> PrecisionConfig:
    text = text.strip()
    if text.upper() == "FP32":
        return FULL_PRECISION
    parts = text.split("|")
    if len(parts) == 1:
        w_bits, acts = _parse_part(parts[0], residual=False)
        return PrecisionConfig(w_bits, acts[0], w_bits, acts)
    if len(parts) == 2:
        kw, ka = _parse_part(parts[0], residual=False)
        rw, ra = _parse_part(parts[1], residual=True)
        return PrecisionConfig(kw, ka[0], rw, ra)
    raise NotationError(f"Cannot parse precision {text!r}")


def format_precision(config: PrecisionConfig) -> str:
    if config.is_full_precision:
        return "FP32"
    keyframe = f"W{config.keyframe_weight_bits}A{config.keyframe_act_bits}"
    acts = config.residual_act_bits
    if len(acts) > 1:
        residual = f"W{config.residual_weight_bits}A{{{','.join(map(str, acts))}}}"
    else:
        residual = f"W{config.residual_weight_bits}A{acts[0]}"
    if residual == keyframe:
        return keyframe
    return f"{keyframe}|{residual}"
