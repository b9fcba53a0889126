"""Post-training calibration of every quantizer in a model.

Weights use min-max ranges.  Activation ranges come from a line search that
minimizes the Frobenius norm of the layer output error over a grid of
candidate ranges.  Layers are calibrated in order, each one on activations
produced by the already-quantized layers upstream.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from resq_video_sim._compat import StrEnum

import numpy as np

from resq_video_sim.engine import (
    ResidualState,
    ScheduleConfig,
    keyframe_forward,
    residual_forward,
)
from resq_video_sim.errors import CalibrationError, QuantParamsError
from resq_video_sim.model import LayerQuantConfig, ModelSpec, WeightSet
from resq_video_sim.notation import PrecisionConfig, parse_precision
from resq_video_sim.quantizer import (
    Granularity,
    QuantizerPool,
    QuantParams,
    fake_quantize,
)
from resq_video_sim.tensor_core import Tensor, _freeze, conv2d, frobenius_norm, sub

logger = logging.getLogger(__name__)


class ActivationSource(StrEnum):
    FRAME = "frame"
    RESIDUAL = "residual"


@dataclass(frozen=True)
class CalibrationConfig:
    samples: int = 64
    grid_points: int = 20
    keyframe_period: int = 3
    precision: PrecisionConfig = field(
        default_factory=lambda: parse_precision("W8A8|W4A4")
    )
    weight_granularity: Granularity = Granularity.PER_TENSOR

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise CalibrationError(f"Need at least one sample, got {self.samples}")
        if self.grid_points < 2:
            raise CalibrationError(f"Need >= 2 grid points, got {self.grid_points}")
        if self.keyframe_period < 1:
            raise CalibrationError(f"Bad keyframe period {self.keyframe_period}")


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def weight_minmax_range(
    w: Tensor,
    bit_width: int | None,
    granularity: Granularity = Granularity.PER_TENSOR,
) -> QuantParams:
    """Min-max quantizer for ``w``; ranges are widened to include zero."""
    w = np.asarray(w)
    if w.size == 0:
        raise QuantParamsError("Cannot calibrate empty weights")
    if bit_width is None:
        return QuantParams.disabled()
    if granularity is Granularity.PER_CHANNEL:
        flat = w.reshape(w.shape[0], -1).astype(np.float64)
        ranges = [(min(0.0, float(c.min())), max(0.0, float(c.max()))) for c in flat]
        if any(lo == hi == 0.0 for lo, hi in ranges):
            logger.warning("All-zero weight channel; using the minimal scale")
        return QuantParams.per_channel(ranges, bit_width)
    r_min = min(0.0, float(w.min()))
    r_max = max(0.0, float(w.max()))
    if r_min == r_max == 0.0:
        logger.warning("All-zero weights; using the minimal scale")
    return QuantParams.from_range(r_min, r_max, bit_width)


# ---------------------------------------------------------------------------
# Activation ranges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RangeSearchResult:
    params: QuantParams
    objective: float
    candidates: int


def activation_range_objective(
    X: np.ndarray,
    w: Tensor,
    w_hat: Tensor,
    params: QuantParams,
    padding: int = 0,
) -> float:
    """``|| X*w - q(X)*w_hat ||_F`` over the whole batch."""
    exact = conv2d(X, w, padding)
    approx = conv2d(fake_quantize(X, params), w_hat, padding)
    return frobenius_norm(sub(exact, approx))


def candidate_ranges(X: np.ndarray, grid_points: int) -> list[tuple[float, float]]:
    """One (r_min, r_max) pair per distinct magnitude the grid can produce.

    The grid spans ``[min(min X, 0), max(max X, 0)]``.  Pairs come out sorted
    by magnitude, smallest first.
    """
    lo = min(float(np.min(X)), 0.0)
    hi = max(float(np.max(X)), 0.0)
    grid = np.linspace(lo, hi, grid_points)
    positive = [float(v) for v in grid if v >= 0.0]
    negative = [float(v) for v in grid if v <= 0.0]
    smallest_neg = max(negative)
    smallest_pos = min(positive)

    pairs: dict[float, tuple[float, float]] = {}
    for v in positive:
        if v >= -smallest_neg:
            pairs.setdefault(v, (smallest_neg, v))
    for v in negative:
        if -v >= smallest_pos:
            pairs.setdefault(-v, (v, smallest_pos))
    return [pairs[m] for m in sorted(pairs)]


def line_search_activation_range(
    X: np.ndarray,
    w: Tensor,
    w_hat: Tensor,
    bit_width: int,
    grid_points: int = 20,
    padding: int = 0,
) -> RangeSearchResult:
    """Best activation range on the grid; ties go to the smallest magnitude."""
    if bit_width < 1:
        raise QuantParamsError(f"Line search needs bit_width >= 1, got {bit_width}")
    if grid_points < 2:
        raise CalibrationError(f"Need >= 2 grid points, got {grid_points}")
    X = np.asarray(X)
    if X.size == 0:
        raise CalibrationError("Empty activation batch")

    best: RangeSearchResult | None = None
    pairs = candidate_ranges(X, grid_points)
    for r_min, r_max in pairs:
        params = QuantParams.from_range(r_min, r_max, bit_width)
        objective = activation_range_objective(X, w, w_hat, params, padding)
        if best is None or objective < best.objective:
            best = RangeSearchResult(params, objective, len(pairs))
    return best


# ---------------------------------------------------------------------------
# Activation batches
# ---------------------------------------------------------------------------


def _full_precision_input(model: ModelSpec, x: Tensor, layer_index: int) -> Tensor:
    h = x
    for layer in model.layers[:layer_index]:
        z = conv2d(layer.fold_input(h), layer.folded_weight, layer.padding)
        h = layer.activate(z)
    return h


def collect_activations(
    model: ModelSpec,
    layer_index: int,
    clips: Sequence[Sequence[Tensor]],
    source: ActivationSource | str = ActivationSource.FRAME,
    keyframe_period: int = 1,
    samples: int | None = None,
    quantize_upstream: bool = True,
) -> Tensor:
    """Batch (N, C, H, W) of layer inputs or layer-input residuals.

    Frame batches hold the input of ``layer_index`` for every frame under the
    keyframe quantizers.  Residual batches hold ``x_t - x_k`` for every
    non-keyframe, with ``x_k`` the input at the frame's period keyframe and
    ``x_t`` produced by the residual path.  ``quantize_upstream=False`` uses
    the full-precision model upstream instead.  At most ``samples`` entries
    are kept, in clip order.
    """
    source = ActivationSource(source)
    if not clips or not any(len(c) for c in clips):
        raise CalibrationError("No calibration clips")
    schedule = ScheduleConfig(keyframe_period)
    batch: list[Tensor] = []

    def layer_input(x: Tensor, state: ResidualState) -> Tensor:
        if not quantize_upstream:
            return _full_precision_input(model, x, layer_index)
        return keyframe_forward(model, x, state, num_layers=layer_index)

    for clip in clips:
        state = ResidualState()
        reference: Tensor | None = None
        for t, frame in enumerate(clip):
            if samples is not None and len(batch) >= samples:
                break
            if source is ActivationSource.FRAME:
                batch.append(layer_input(frame, state))
                continue
            if schedule.is_keyframe(t):
                reference = layer_input(frame, state)
                continue
            if not quantize_upstream:
                current = _full_precision_input(model, frame, layer_index)
            elif layer_index == 0:
                current = frame
            else:
                current = residual_forward(model, frame, state, num_layers=layer_index)
            batch.append(sub(current, reference))

    if not batch:
        raise CalibrationError(
            f"Empty {source.value} batch for layer {layer_index} "
            f"(period {keyframe_period})"
        )
    return _freeze(np.stack(batch))


# ---------------------------------------------------------------------------
# Whole model
# ---------------------------------------------------------------------------


def _activation_params(
    X: Tensor,
    w: Tensor,
    w_hat: Tensor,
    bit_width: int,
    config: CalibrationConfig,
    padding: int,
) -> QuantParams:
    if bit_width == 0:
        return QuantParams.zero()
    return line_search_activation_range(
        X, w, w_hat, bit_width, config.grid_points, padding
    ).params


def calibrate_model(
    model: ModelSpec,
    clips: Sequence[Sequence[Tensor]],
    config: CalibrationConfig | None = None,
) -> ModelSpec:
    """Set keyframe and residual quantizers of every layer.

    Weights are quantized first.  Then, layer by layer, the keyframe
    activation range is fit on keyframe-path inputs and the residual range
    (or each pool entry separately) on residual-path residuals, both with
    every upstream layer quantized.
    """
    config = config or CalibrationConfig()
    precision = config.precision
    if precision.is_full_precision:
        return model.full_precision()
    if not clips:
        raise CalibrationError("No calibration clips")

    off = QuantParams.disabled()
    granularity = config.weight_granularity
    model = model.with_quant(
        [
            LayerQuantConfig(
                keyframe_weight=weight_minmax_range(
                    layer.folded_weight, precision.keyframe_weight_bits, granularity
                ),
                keyframe_act=off,
                residual_weight=weight_minmax_range(
                    layer.folded_weight, precision.residual_weight_bits, granularity
                ),
                residual_act=off,
            )
            for layer in model.layers
        ]
    )

    for index in range(len(model.layers)):
        layer = model.layers[index]
        data = slice(0, layer.in_channels)
        frames = collect_activations(
            model,
            index,
            clips,
            ActivationSource.FRAME,
            config.keyframe_period,
            config.samples,
        )
        keyframe_act = _activation_params(
            frames,
            layer.weight,
            layer.quantized_weight(WeightSet.KEYFRAME)[:, data],
            precision.keyframe_act_bits,
            config,
            layer.padding,
        )
        quant = dataclasses.replace(layer.require_quant(), keyframe_act=keyframe_act)
        model = model.with_layer_quant(index, quant)
        layer = model.layers[index]

        residuals = collect_activations(
            model,
            index,
            clips,
            ActivationSource.RESIDUAL,
            config.keyframe_period,
            config.samples,
        )
        w_hat = layer.quantized_weight(WeightSet.RESIDUAL)[:, data]
        entries = [
            _activation_params(
                residuals, layer.weight, w_hat, bits, config, layer.padding
            )
            for bits in precision.residual_act_bits
        ]
        residual_act = QuantizerPool(tuple(entries)) if len(entries) > 1 else entries[0]
        model = model.with_layer_quant(
            index, dataclasses.replace(quant, residual_act=residual_act)
        )
        logger.info(
            "Calibrated layer %d: keyframe scale %s, residual bits %s",
            index,
            keyframe_act.scales,
            precision.residual_act_bits,
        )
    return model
