"""Sequence inference: frame quantization and residual (sigma-delta) quantization.

Keyframes run the keyframe-quantized pass and cache, per layer, the layer input
and the convolution output.  Residual frames convolve only the quantized
difference to the cached input with the residual weights and add the
cached output back:

    z_t = q_r(x_t - x_k) * q_rw(w) + z_k

Nonlinearities act on the reconstructed ``z_t``, so every layer recomputes its
residual against its own cached input.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from resq_video_sim._compat import StrEnum
from typing import TYPE_CHECKING

import numpy as np

from resq_video_sim.bops import (
    BopEntry,
    BopReport,
    LayerShape,
    conv_bops,
    mixed_conv_bops,
    policy_overhead_bops,
    sequence_report,
)
from resq_video_sim.errors import ConfigError, DimensionError, SequencingError
from resq_video_sim.model import ConvLayer, ModelSpec, WeightSet
from resq_video_sim.quantizer import fake_quantize
from resq_video_sim.tensor_core import Tensor, add, as_tensor, conv2d, mse, sub

if TYPE_CHECKING:
    from resq_video_sim.dynamic_policy import IndexMap, PolicyConfig

logger = logging.getLogger(__name__)


class InferenceMode(StrEnum):
    FRAME = "frame"
    RESQ_PAIRWISE = "resq-pairwise"
    RESQ_RECURRENT = "resq-recurrent"
    RESQ_DYNAMIC = "resq-dynamic"

    @property
    def residual_mode(self) -> ResidualMode:
        if self is InferenceMode.RESQ_RECURRENT:
            return ResidualMode.RECURRENT
        return ResidualMode.PAIRWISE


class ResidualMode(StrEnum):
    PAIRWISE = "pairwise"
    RECURRENT = "recurrent"


@dataclass(frozen=True)
class ScheduleConfig:
    keyframe_period: int = 1

    def __post_init__(self) -> None:
        if self.keyframe_period < 1:
            raise ConfigError(f"Keyframe period must be >= 1, got {self.keyframe_period}")

    def is_keyframe(self, t: int) -> bool:
        return t % self.keyframe_period == 0

    def distance(self, t: int) -> int:
        """Frames since the last keyframe."""
        return t % self.keyframe_period


# ---------------------------------------------------------------------------
# Residual state
# ---------------------------------------------------------------------------


@dataclass
class LayerReference:
    """Cached keyframe quantities of one layer.

    ``reference_input`` is the layer input produced by the quantized upstream
    pipeline and ``reference_output`` the convolution output before the
    nonlinearity.
    """

    reference_input: Tensor
    reference_output: Tensor


@dataclass
class ResidualState:
    mode: ResidualMode = ResidualMode.PAIRWISE
    layers: list[LayerReference] = field(default_factory=list)
    last_deltas: list[Tensor] = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return bool(self.layers)

    def reset(self) -> None:
        self.layers = []
        self.last_deltas = []

    def reference(self, index: int) -> LayerReference:
        if index >= len(self.layers):
            raise SequencingError(
                f"No keyframe reference for layer {index}; run a keyframe first"
            )
        return self.layers[index]


# ---------------------------------------------------------------------------
# Per-layer steps
# ---------------------------------------------------------------------------


def keyframe_layer(layer: ConvLayer, x: Tensor) -> tuple[Tensor, LayerReference]:
    """Keyframe-quantized layer; returns the activated output and the new reference."""
    quant = layer.require_quant()
    xq = fake_quantize(x, quant.keyframe_act)
    z = conv2d(
        layer.fold_input(xq), layer.quantized_weight(WeightSet.KEYFRAME), layer.padding
    )
    return layer.activate(z), LayerReference(x, z)


def residual_layer(
    layer: ConvLayer,
    x: Tensor,
    reference: LayerReference,
    quantize: Callable[[Tensor], Tensor],
) -> tuple[Tensor, Tensor, Tensor]:
    """Residual layer step; returns (activated output, reconstructed z, delta)."""
    delta = sub(x, reference.reference_input)
    dq = quantize(delta)
    z = add(
        conv2d(
            layer.fold_input(dq, residual=True),
            layer.quantized_weight(WeightSet.RESIDUAL),
            layer.padding,
        ),
        reference.reference_output,
    )
    return layer.activate(z), z, delta


def update_reference(
    state: ResidualState, index: int, x: Tensor, z: Tensor
) -> None:
    """Move a recurrent reference to the frame just processed."""
    if state.mode is ResidualMode.RECURRENT:
        state.layers[index] = LayerReference(x, z)


# ---------------------------------------------------------------------------
# Whole-model passes
# ---------------------------------------------------------------------------


def _check_input(model: ModelSpec, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != model.in_channels:
        raise DimensionError(
            f"Model expects ({model.in_channels}, H, W) frames, got {x.shape}"
        )
    return x


def _layer_count(model: ModelSpec, num_layers: int | None) -> int:
    if num_layers is None:
        return len(model.layers)
    if not 0 <= num_layers <= len(model.layers):
        raise DimensionError(f"num_layers={num_layers} outside 0..{len(model.layers)}")
    return num_layers


def full_precision_forward(model: ModelSpec, x: Tensor) -> Tensor:
    """Unquantized reference pass; quantizer slots are ignored."""
    h = _check_input(model, x)
    for layer in model.layers:
        z = conv2d(layer.fold_input(h), layer.folded_weight, layer.padding)
        h = layer.activate(z)
    return h


def _frame_layer(layer: ConvLayer, h: Tensor, which: WeightSet) -> Tensor:
    hq = fake_quantize(h, layer.require_quant().act_params(which))
    return layer.activate(
        conv2d(layer.fold_input(hq), layer.quantized_weight(which), layer.padding)
    )


def frame_forward(
    model: ModelSpec, x: Tensor, which: WeightSet = WeightSet.KEYFRAME
) -> Tensor:
    """Each frame on its own, with either quantizer set."""
    h = _check_input(model, x)
    for layer in model.layers:
        h = _frame_layer(layer, h, which)
    return h


def keyframe_forward(
    model: ModelSpec,
    x: Tensor,
    state: ResidualState,
    num_layers: int | None = None,
) -> Tensor:
    """Keyframe pass that (re)initializes ``state``.

    With ``num_layers`` the pass stops early and returns the input of layer
    ``num_layers``; only the references of the layers run are stored.
    """
    h = _check_input(model, x)
    state.reset()
    for layer in model.layers[: _layer_count(model, num_layers)]:
        h, ref = keyframe_layer(layer, h)
        state.layers.append(ref)
    return h


def residual_forward(
    model: ModelSpec,
    x: Tensor,
    state: ResidualState,
    num_layers: int | None = None,
) -> Tensor:
    """Residual pass against the references in ``state``."""
    if not state.initialized:
        raise SequencingError("Residual frame before any keyframe")
    h = _check_input(model, x)
    deltas = []
    for i, layer in enumerate(model.layers[: _layer_count(model, num_layers)]):
        act = layer.require_quant().residual_act_static
        x_in = h
        h, z, delta = residual_layer(
            layer, x_in, state.reference(i), lambda d, p=act: fake_quantize(d, p)
        )
        deltas.append(delta)
        update_reference(state, i, x_in, z)
    state.last_deltas = deltas
    return h


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class SequenceResult:
    outputs: list[Tensor]
    report: BopReport
    frame_mse: list[float]
    distances: list[int]
    index_maps: list[list[IndexMap] | None]

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.frame_mse))

    def mse_by_distance(self) -> dict[int, float]:
        """Mean output MSE grouped by frames since the last keyframe."""
        grouped: dict[int, list[float]] = {}
        for d, value in zip(self.distances, self.frame_mse):
            grouped.setdefault(d, []).append(value)
        return {d: float(np.mean(v)) for d, v in sorted(grouped.items())}


FrameCallback = Callable[[int, Tensor, float], None]


def _static_entries(
    model: ModelSpec, frame_index: int, in_hw: tuple[int, int], which: WeightSet
) -> list[BopEntry]:
    entries = []
    for i, layer in enumerate(model.layers):
        shape = LayerShape.from_layer(layer, in_hw)
        quant = layer.require_quant()
        b_w = quant.weight_params(which).effective_bits
        b_a = quant.act_params(which).effective_bits
        entries.append(
            BopEntry(
                frame_index=frame_index,
                layer=i,
                is_keyframe=which is WeightSet.KEYFRAME,
                macs=shape.macs,
                weight_bits=b_w,
                act_bits=b_a,
                conv_bops=conv_bops(shape, b_w, b_a),
            )
        )
        in_hw = (shape.out_h, shape.out_w)
    return entries


def run_sequence(
    model: ModelSpec,
    clip: Sequence[Tensor],
    schedule: ScheduleConfig,
    mode: InferenceMode | str = InferenceMode.RESQ_PAIRWISE,
    policy: PolicyConfig | None = None,
    on_frame: FrameCallback | None = None,
) -> SequenceResult:
    """Run ``clip`` frame by frame and account every layer's BOPs.

    Frame mode runs every frame through the keyframe quantizers regardless
    of ``schedule``; the schedule still defines each frame's distance.
    ``on_frame(t, output, mse)`` is called after each frame and may raise to
    stop the run.
    """
    mode = InferenceMode(mode)
    if not clip:
        raise DimensionError("Empty clip")
    model.require_quantized()
    if mode is InferenceMode.RESQ_DYNAMIC:
        from resq_video_sim.dynamic_policy import PolicyConfig, dynamic_residual_forward

        policy = policy or PolicyConfig()

    state = ResidualState(mode=mode.residual_mode)
    outputs: list[Tensor] = []
    frame_mse: list[float] = []
    distances: list[int] = []
    index_maps: list[list[IndexMap] | None] = []
    entries: list[BopEntry] = []

    for t, frame in enumerate(clip):
        frame = _check_input(model, frame)
        in_hw = (frame.shape[1], frame.shape[2])
        maps = None
        if mode is InferenceMode.FRAME:
            out = frame_forward(model, frame, WeightSet.KEYFRAME)
            entries.extend(_static_entries(model, t, in_hw, WeightSet.KEYFRAME))
        elif schedule.is_keyframe(t):
            out = keyframe_forward(model, frame, state)
            entries.extend(_static_entries(model, t, in_hw, WeightSet.KEYFRAME))
        elif mode is InferenceMode.RESQ_DYNAMIC:
            out, maps = dynamic_residual_forward(model, frame, state, policy)
            entries.extend(_dynamic_entries(model, t, in_hw, maps))
        else:
            out = residual_forward(model, frame, state)
            entries.extend(_static_entries(model, t, in_hw, WeightSet.RESIDUAL))

        error = mse(out, full_precision_forward(model, frame))
        outputs.append(out)
        frame_mse.append(error)
        distances.append(schedule.distance(t))
        index_maps.append(maps)
        logger.debug("Frame %d (%s): mse=%.3e", t, mode.value, error)
        if on_frame is not None:
            on_frame(t, out, error)

    report = sequence_report(entries)
    return SequenceResult(outputs, report, frame_mse, distances, index_maps)


def _dynamic_entries(
    model: ModelSpec, frame_index: int, in_hw: tuple[int, int], maps: list[IndexMap]
) -> list[BopEntry]:
    entries = []
    for i, (layer, index_map) in enumerate(zip(model.layers, maps)):
        shape = LayerShape.from_layer(layer, in_hw)
        quant = layer.require_quant()
        pool = quant.residual_act
        b_w = quant.residual_weight.effective_bits
        pool_bits = [entry.effective_bits for entry in pool]
        selected = np.asarray(pool_bits)[index_map.indices - 1]
        bits, counts = np.unique(selected, return_counts=True)
        entries.append(
            BopEntry(
                frame_index=frame_index,
                layer=i,
                is_keyframe=False,
                macs=shape.macs,
                weight_bits=b_w,
                act_bits=None,
                act_bit_histogram={int(b): int(c) for b, c in zip(bits, counts)},
                conv_bops=mixed_conv_bops(shape, b_w, index_map.indices, pool_bits),
                policy_bops=policy_overhead_bops(
                    layer.in_channels, in_hw[0], in_hw[1], len(pool)
                ),
            )
        )
        in_hw = (shape.out_h, shape.out_w)
    return entries
