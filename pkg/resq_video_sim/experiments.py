"""Experiment drivers.

Each driver returns typed rows and can write them as CSV; policy maps are
written as PGM images.  Every driver is deterministic for fixed seeds.
"""

from __future__ import annotations

import csv
import logging
import os
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import stats

from resq_video_sim.bops import GIGA
from resq_video_sim.calibration import (
    ActivationSource,
    CalibrationConfig,
    calibrate_model,
    collect_activations,
    weight_minmax_range,
)
from resq_video_sim.dynamic_policy import (
    DEFAULT_TAU,
    PolicyConfig,
    approx_error_map,
    exact_error_map,
    write_pgm,
)
from resq_video_sim.engine import (
    InferenceMode,
    ScheduleConfig,
    SequenceResult,
    keyframe_layer,
    run_sequence,
)
from resq_video_sim.model import ModelSpec
from resq_video_sim.notation import PrecisionConfig, parse_precision
from resq_video_sim.quantizer import (
    Granularity,
    fake_quantize,
    integer_conv2d,
    quantize_to_codes,
)
from resq_video_sim.synthetic import (
    SyntheticClip,
    SyntheticClipSpec,
    ToyModelSpec,
    build_from_spec,
    generate_clips,
)
from resq_video_sim.tensor_core import Tensor, as_tensor, conv2d, variance

logger = logging.getLogger(__name__)

# Maps compared against their bound get this much float slack.
BOUND_TOLERANCE = 1e-6


def resolve_threads(threads: int | None = None) -> int:
    """CLI value, then ``RESQ_THREADS``, then the CPU count."""
    if threads is None:
        env = os.environ.get("RESQ_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, threads)


def write_rows(path: str | Path, rows: Sequence[Any], columns: list[str] | None = None) -> None:
    """Write dataclass rows (or plain sequences with ``columns``) as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = [f.name for f in fields(rows[0])] if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            values = astuple(row) if hasattr(row, "__dataclass_fields__") else row
            writer.writerow([_cell(v) for v in values])
    logger.info("Wrote %d rows to %s", len(rows), path)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _frames(clips: Iterable[SyntheticClip | Sequence[Tensor]]) -> list[list[Tensor]]:
    return [list(c.frames) if isinstance(c, SyntheticClip) else list(c) for c in clips]


# ---------------------------------------------------------------------------
# Experiment files
# ---------------------------------------------------------------------------


class ExperimentSpec(BaseModel):
    """A sweep described as one JSON document."""

    name: str = "sweep"
    model: ToyModelSpec = Field(default_factory=ToyModelSpec)
    clip: SyntheticClipSpec = Field(default_factory=SyntheticClipSpec)
    calibration_clips: int = Field(default=4, ge=1)
    evaluation_clips: int = Field(default=4, ge=1)
    periods: list[int] = Field(default_factory=lambda: [2, 4, 6, 8])
    precisions: list[str] = Field(default_factory=lambda: ["W8A4", "W8A8|W8A4"])
    modes: list[InferenceMode] = Field(
        default_factory=lambda: [InferenceMode.FRAME, InferenceMode.RESQ_PAIRWISE]
    )
    samples: int = Field(default=64, ge=1)
    grid_points: int = Field(default=20, ge=2)
    tau: float = DEFAULT_TAU
    weight_granularity: Granularity = Granularity.PER_TENSOR

    @field_validator("periods")
    @classmethod
    def _periods_positive(cls, value: list[int]) -> list[int]:
        if not value or any(p < 1 for p in value):
            raise ValueError("periods must be a non-empty list of integers >= 1")
        return value

    @field_validator("precisions")
    @classmethod
    def _precisions_parse(cls, value: list[str]) -> list[str]:
        for text in value:
            parse_precision(text)
        return value

    def build_model(self) -> ModelSpec:
        """The toy model; its input channels default to the clip's."""
        model = self.model
        if model.in_channels is None:
            model = model.model_copy(update={"in_channels": self.clip.channels})
        return build_from_spec(model)

    def calibration_set(self) -> list[SyntheticClip]:
        return generate_clips(self.clip, self.calibration_clips)

    def evaluation_set(self) -> list[SyntheticClip]:
        """Evaluation clips use seeds after the calibration clips."""
        start = self.clip.model_copy(update={"seed": self.clip.seed + self.calibration_clips})
        return generate_clips(start, self.evaluation_clips)


# ---------------------------------------------------------------------------
# Variance and error of frames vs residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceRow:
    layer: int
    frame_variance: float
    residual_variance: float
    frame_quant_error: float
    residual_quant_error: float
    bit_width: int


def _minmax_error(batch: np.ndarray, bit_width: int) -> float:
    params = weight_minmax_range(batch, bit_width)
    return float(np.mean(np.abs(batch.astype(np.float64) - fake_quantize(batch, params))))


def experiment_variance(
    model: ModelSpec,
    clips: Sequence[SyntheticClip | Sequence[Tensor]],
    keyframe_period: int = 2,
    bit_width: int = 4,
) -> list[VarianceRow]:
    """Per-layer statistics of full-precision layer inputs vs their residuals.

    Quantization errors use min-max ranges fit to each batch at ``bit_width``.
    """
    frames = _frames(clips)
    rows = []
    for index in range(len(model.layers)):
        x_frame = collect_activations(
            model, index, frames, ActivationSource.FRAME, keyframe_period,
            quantize_upstream=False,
        )
        x_res = collect_activations(
            model, index, frames, ActivationSource.RESIDUAL, keyframe_period,
            quantize_upstream=False,
        )
        rows.append(
            VarianceRow(
                layer=index,
                frame_variance=variance(x_frame),
                residual_variance=variance(x_res),
                frame_quant_error=_minmax_error(x_frame, bit_width),
                residual_quant_error=_minmax_error(x_res, bit_width),
                bit_width=bit_width,
            )
        )
        logger.debug("Variance layer %d: %s", index, rows[-1])
    return rows


# ---------------------------------------------------------------------------
# Quality vs cost sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TradeoffRow:
    mode: str
    precision: str
    period: int
    amortized_gbops: float
    amortized_gbops_with_policy: float
    peak_gbops: float
    mse: float
    mse_by_distance: tuple[float | None, ...]


def _calibrated(
    model: ModelSpec,
    clips: list[list[Tensor]],
    precision: PrecisionConfig,
    period: int,
    spec: ExperimentSpec,
) -> ModelSpec:
    config = CalibrationConfig(
        samples=spec.samples,
        grid_points=spec.grid_points,
        keyframe_period=period,
        precision=precision,
        weight_granularity=spec.weight_granularity,
    )
    return calibrate_model(model, clips, config)


def _evaluate(
    model: ModelSpec,
    clips: list[list[Tensor]],
    period: int,
    mode: InferenceMode,
    tau: float,
) -> list[SequenceResult]:
    schedule = ScheduleConfig(period)
    policy = PolicyConfig(tau)
    return [run_sequence(model, clip, schedule, mode, policy) for clip in clips]


def _mean_by_distance(
    results: list[SequenceResult], max_distance: int
) -> tuple[float | None, ...]:
    by_distance: list[float | None] = []
    for d in range(max_distance):
        values = [r.mse_by_distance().get(d) for r in results]
        values = [v for v in values if v is not None]
        by_distance.append(float(np.mean(values)) if values else None)
    return tuple(by_distance)


def _summarize(
    results: list[SequenceResult],
    mode: InferenceMode,
    precision: str,
    period: int,
    max_distance: int,
) -> TradeoffRow:
    return TradeoffRow(
        mode=mode.value,
        precision=precision,
        period=period,
        amortized_gbops=float(np.mean([r.report.amortized(False) for r in results])) / GIGA,
        amortized_gbops_with_policy=float(np.mean([r.report.amortized() for r in results]))
        / GIGA,
        peak_gbops=float(np.max([r.report.peak() for r in results])) / GIGA,
        mse=float(np.mean([r.mean_mse for r in results])),
        mse_by_distance=_mean_by_distance(results, max_distance),
    )


def experiment_tradeoff(
    spec: ExperimentSpec, threads: int | None = None
) -> list[TradeoffRow]:
    """Amortized cost and output MSE for every (precision, period, mode) cell.

    Frame mode does not depend on the period and contributes one row per
    precision, reported with period 1.  Dynamic mode is only run for
    precisions with a residual pool.
    """
    model = spec.build_model()
    calib = _frames(spec.calibration_set())
    evaluation = _frames(spec.evaluation_set())
    residual_periods = [p for p in spec.periods if p >= 2]
    frame_period = residual_periods[0] if residual_periods else 2

    cells: list[tuple[InferenceMode, str, int]] = []
    for text in spec.precisions:
        precision = parse_precision(text)
        for mode in spec.modes:
            if mode is InferenceMode.FRAME:
                cells.append((mode, text, 1))
                continue
            if mode is InferenceMode.RESQ_DYNAMIC and not precision.uses_pool:
                logger.warning("Skipping dynamic mode for %s: no residual pool", text)
                continue
            cells.extend((mode, text, p) for p in spec.periods)

    calib_keys = sorted(
        {(text, frame_period if period == 1 else period) for _, text, period in cells}
    )
    workers = resolve_threads(threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        calibrated = dict(
            zip(
                calib_keys,
                pool.map(
                    lambda key: _calibrated(
                        model, calib, parse_precision(key[0]), key[1], spec
                    ),
                    calib_keys,
                ),
            )
        )

        def run_cell(cell: tuple[InferenceMode, str, int]) -> TradeoffRow:
            mode, text, period = cell
            key = (text, frame_period if period == 1 else period)
            results = _evaluate(calibrated[key], evaluation, period, mode, spec.tau)
            row = _summarize(results, mode, text, period, max(spec.periods))
            logger.info(
                "Cell %s %s T=%d: %.4f GBOPs, mse %.3e",
                mode.value, text, period, row.amortized_gbops, row.mse,
            )
            return row

        return list(pool.map(run_cell, cells))


def tradeoff_columns(max_period: int) -> list[str]:
    return [
        "mode",
        "precision",
        "period",
        "amortized_gbops",
        "amortized_gbops_with_policy",
        "peak_gbops",
        "mse",
    ] + [f"mse_dt{d}" for d in range(max_period)]


def write_tradeoff(path: str | Path, rows: Sequence[TradeoffRow], max_period: int) -> None:
    flat = [
        [r.mode, r.precision, r.period, r.amortized_gbops, r.amortized_gbops_with_policy,
         r.peak_gbops, r.mse, *r.mse_by_distance]
        for r in rows
    ]
    write_rows(path, flat, tradeoff_columns(max_period))


# ---------------------------------------------------------------------------
# Policy maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyMapRow:
    distance: int
    mean_bits: float
    mean_bits_moving: float | None
    mean_bits_static: float | None


@dataclass
class PolicyMapSummary:
    rows: list[PolicyMapRow]
    spearman_rho: float | None
    moving_mean_bits: float | None
    static_mean_bits: float | None
    map_paths: list[Path]


def experiment_policy_map(
    model: ModelSpec,
    clips: Sequence[SyntheticClip],
    keyframe_period: int,
    tau: float = DEFAULT_TAU,
    out_dir: str | Path | None = None,
) -> PolicyMapSummary:
    """Dynamic-mode bit-width maps plus their trend with keyframe distance.

    ``model`` must carry residual pools.  Maps are written as
    ``clip_CC_frame_TTT_layer_LL.pgm`` (pixel value = selected bits) when
    ``out_dir`` is given.  Moving/static statistics use the first layer,
    whose grid matches the frames.
    """
    schedule = ScheduleConfig(keyframe_period)
    policy = PolicyConfig(tau)
    bits_by_distance: dict[int, list[float]] = {}
    moving_by_distance: dict[int, list[float]] = {}
    static_by_distance: dict[int, list[float]] = {}
    moving_all: list[np.ndarray] = []
    static_all: list[np.ndarray] = []
    paths: list[Path] = []

    for c, clip in enumerate(clips):
        result = run_sequence(model, clip.frames, schedule, InferenceMode.RESQ_DYNAMIC, policy)
        for t, maps in enumerate(result.index_maps):
            if maps is None:
                continue
            d = schedule.distance(t)
            keyframe = t - d
            layer_bits = []
            for index, index_map in enumerate(maps):
                pool = model.layers[index].require_quant().residual_act
                bit_map = index_map.bit_map(pool)
                layer_bits.append(float(bit_map.mean()))
                if out_dir is not None:
                    path = Path(out_dir) / f"clip_{c:02d}_frame_{t:03d}_layer_{index:02d}.pgm"
                    write_pgm(path, bit_map, max(pool.bit_widths))
                    paths.append(path)
            bits_by_distance.setdefault(d, []).append(float(np.mean(layer_bits)))

            first_bits = maps[0].bit_map(model.layers[0].require_quant().residual_act)
            if clip.clean_frames:
                moving = clip.changed_since(keyframe, t)
                if moving.any():
                    moving_all.append(first_bits[moving])
                    moving_by_distance.setdefault(d, []).append(float(first_bits[moving].mean()))
                if (~moving).any():
                    static_all.append(first_bits[~moving])
                    static_by_distance.setdefault(d, []).append(
                        float(first_bits[~moving].mean())
                    )

    rows = [
        PolicyMapRow(
            distance=d,
            mean_bits=float(np.mean(bits_by_distance[d])),
            mean_bits_moving=_mean_or_none(moving_by_distance.get(d)),
            mean_bits_static=_mean_or_none(static_by_distance.get(d)),
        )
        for d in sorted(bits_by_distance)
    ]
    rho = None
    if len(rows) >= 2:
        xs = [d for d in sorted(bits_by_distance) for _ in bits_by_distance[d]]
        ys = [v for d in sorted(bits_by_distance) for v in bits_by_distance[d]]
        if len(set(ys)) > 1:
            rho = float(stats.spearmanr(xs, ys).statistic)
    return PolicyMapSummary(
        rows=rows,
        spearman_rho=rho,
        moving_mean_bits=_concat_mean(moving_all),
        static_mean_bits=_concat_mean(static_all),
        map_paths=paths,
    )


@dataclass(frozen=True)
class DynamicEfficiencyRow:
    clip: int
    residual_conv_bops_static: int
    residual_conv_bops_dynamic: int
    policy_bops: int
    reduction: float
    reduction_with_policy: float
    mse_static: float
    mse_dynamic: float
    mse_inflation: float


def _residual_bops(result: SequenceResult) -> tuple[int, int]:
    entries = [e for e in result.report.entries if not e.is_keyframe]
    return sum(e.conv_bops for e in entries), sum(e.policy_bops for e in entries)


def _residual_mse(result: SequenceResult) -> float:
    values = [m for m, d in zip(result.frame_mse, result.distances) if d > 0]
    return float(np.mean(values)) if values else 0.0


def experiment_dynamic_efficiency(
    model: ModelSpec,
    clips: Sequence[SyntheticClip | Sequence[Tensor]],
    keyframe_period: int,
    tau: float = DEFAULT_TAU,
) -> list[DynamicEfficiencyRow]:
    """Dynamic policy vs static residuals at the pool maximum, one row per clip.

    Reductions count residual-frame convolutions; ``reduction_with_policy``
    also charges the policy overhead to the dynamic side.
    """
    rows = []
    for c, frames in enumerate(_frames(clips)):
        static = run_sequence(
            model, frames, ScheduleConfig(keyframe_period), InferenceMode.RESQ_PAIRWISE
        )
        dynamic = _evaluate(model, [frames], keyframe_period, InferenceMode.RESQ_DYNAMIC, tau)[0]
        static_bops, _ = _residual_bops(static)
        dynamic_bops, policy_bops = _residual_bops(dynamic)
        if static_bops == 0:
            reduction = reduction_with_policy = 0.0
        else:
            reduction = 1.0 - dynamic_bops / static_bops
            reduction_with_policy = 1.0 - (dynamic_bops + policy_bops) / static_bops
        mse_static, mse_dynamic = _residual_mse(static), _residual_mse(dynamic)
        if mse_static > 0.0:
            inflation = mse_dynamic / mse_static
        else:
            inflation = 1.0 if mse_dynamic == 0.0 else float("inf")
        rows.append(
            DynamicEfficiencyRow(
                clip=c,
                residual_conv_bops_static=static_bops,
                residual_conv_bops_dynamic=dynamic_bops,
                policy_bops=policy_bops,
                reduction=reduction,
                reduction_with_policy=reduction_with_policy,
                mse_static=mse_static,
                mse_dynamic=mse_dynamic,
                mse_inflation=inflation,
            )
        )
        logger.info(
            "Clip %d: residual BOP reduction %.3f (%.3f with policy), mse inflation %.3f",
            c,
            reduction,
            reduction_with_policy,
            inflation,
        )
    return rows


def _mean_or_none(values: list[float] | None) -> float | None:
    return float(np.mean(values)) if values else None


def _concat_mean(chunks: list[np.ndarray]) -> float | None:
    if not chunks:
        return None
    return float(np.concatenate(chunks).mean())


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def integer_path_error(model: ModelSpec, frame: Tensor) -> float:
    """Largest relative gap between integer-code and fake-quantized keyframe convolutions.

    Covers the data channels of every layer; the input of each layer comes
    from the keyframe pass.
    """
    h = as_tensor(frame)
    worst = 0.0
    for layer in model.layers:
        quant = layer.require_quant()
        w = layer.folded_weight[:, : layer.in_channels]
        got = integer_conv2d(
            quantize_to_codes(h, quant.keyframe_act),
            quantize_to_codes(w, quant.keyframe_weight),
            layer.padding,
        )
        expected = conv2d(
            fake_quantize(h, quant.keyframe_act),
            fake_quantize(w, quant.keyframe_weight),
            layer.padding,
        )
        peak = max(float(np.abs(expected).max()), np.finfo(np.float32).tiny)
        worst = max(worst, float(np.abs(got - expected).max()) / peak)
        h, _ = keyframe_layer(layer, h)
    return worst


@dataclass(frozen=True)
class GranularityRow:
    granularity: str
    precision: str
    period: int
    mse: float
    integer_path_error: float


def experiment_granularity(
    model: ModelSpec,
    calibration_clips: Sequence[SyntheticClip | Sequence[Tensor]],
    evaluation_clips: Sequence[SyntheticClip | Sequence[Tensor]],
    precisions: Sequence[str] = ("W8A8|W4A4", "W8A8|W3A3", "W4A4|W2A2"),
    keyframe_period: int = 4,
    samples: int = 64,
    grid_points: int = 20,
) -> list[GranularityRow]:
    """ResQ output MSE with per-tensor vs per-channel weight scales."""
    calib = _frames(calibration_clips)
    evaluation = _frames(evaluation_clips)
    rows = []
    for text in precisions:
        for granularity in Granularity:
            config = CalibrationConfig(
                samples=samples,
                grid_points=grid_points,
                keyframe_period=keyframe_period,
                precision=parse_precision(text),
                weight_granularity=granularity,
            )
            calibrated = calibrate_model(model, calib, config)
            results = _evaluate(
                calibrated, evaluation, keyframe_period, InferenceMode.RESQ_PAIRWISE, 0.0
            )
            rows.append(
                GranularityRow(
                    granularity.value,
                    text,
                    keyframe_period,
                    float(np.mean([r.mean_mse for r in results])),
                    integer_path_error(calibrated, evaluation[0][0]),
                )
            )
    return rows


@dataclass(frozen=True)
class TemporalRow:
    distance: int
    mse_pairwise: float
    mse_recurrent: float


def experiment_temporal(
    model: ModelSpec,
    evaluation_clips: Sequence[SyntheticClip | Sequence[Tensor]],
    keyframe_period: int = 8,
) -> list[TemporalRow]:
    """Per-distance output MSE of pairwise vs recurrent residuals.

    ``model`` must already be calibrated.
    """
    evaluation = _frames(evaluation_clips)
    per_mode = {}
    for mode in (InferenceMode.RESQ_PAIRWISE, InferenceMode.RESQ_RECURRENT):
        results = _evaluate(model, evaluation, keyframe_period, mode, 0.0)
        per_mode[mode] = _mean_by_distance(results, keyframe_period)
    return [
        TemporalRow(
            d,
            per_mode[InferenceMode.RESQ_PAIRWISE][d],
            per_mode[InferenceMode.RESQ_RECURRENT][d],
        )
        for d in range(keyframe_period)
        if per_mode[InferenceMode.RESQ_PAIRWISE][d] is not None
    ]


@dataclass(frozen=True)
class YoungBoundRow:
    kernel: int
    bit_width: int
    pixels: int
    violation_rate: float
    max_exact_over_approx: float


def experiment_young_bound(
    seeds: Iterable[int] = range(10),
    kernels: Sequence[int] = (1, 3),
    pool_bits: Sequence[int] = (2, 4, 8),
    channels: int = 4,
    size: int = 16,
) -> list[YoungBoundRow]:
    """How often the convolution-free estimate falls below the exact error map.

    Residuals and weights are Gaussian; each pool entry is a min-max
    quantizer fit to the residual.  Comparison is done on the output grid
    with same padding.
    """
    seeds = list(seeds)
    rows = []
    for kernel in kernels:
        for bits in pool_bits:
            violations = 0
            pixels = 0
            worst = 0.0
            for seed in seeds:
                rng = np.random.default_rng(seed)
                delta = as_tensor(rng.normal(0.0, 0.1, size=(channels, size, size)))
                w_hat = as_tensor(
                    rng.normal(0.0, 0.5, size=(channels, channels, kernel, kernel))
                )
                entry = weight_minmax_range(delta, bits)
                exact = exact_error_map(delta, w_hat, entry, padding=kernel // 2)
                approx = approx_error_map(delta, w_hat, entry)
                violations += int(np.sum(approx < exact - BOUND_TOLERANCE))
                pixels += exact.size
                ratio = np.divide(
                    exact, approx, out=np.zeros(exact.shape), where=approx > 0
                )
                worst = max(worst, float(ratio.max()))
            rows.append(YoungBoundRow(kernel, bits, pixels, violations / pixels, worst))
    return rows

