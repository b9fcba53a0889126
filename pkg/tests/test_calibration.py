"""Tests for weight ranges, the activation line search and model calibration."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from resq_video_sim.calibration import (
    ActivationSource,
    CalibrationConfig,
    activation_range_objective,
    calibrate_model,
    candidate_ranges,
    collect_activations,
    line_search_activation_range,
    weight_minmax_range,
)
from resq_video_sim.errors import CalibrationError, QuantParamsError
from resq_video_sim.model import WeightSet
from resq_video_sim.notation import parse_precision
from resq_video_sim.quantizer import Granularity, QuantizerPool, QuantParams, fake_quantize
from resq_video_sim.synthetic import SyntheticClipSpec, build_toy_model, generate_clips
from resq_video_sim.tensor_core import as_tensor, variance


def _clips(count: int = 2, **kwargs) -> list:
    spec = SyntheticClipSpec(height=10, width=10, length=6, **kwargs)
    return [c.frames for c in generate_clips(spec, count)]


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def test_weight_minmax_includes_zero():
    params = weight_minmax_range(as_tensor([0.5, 1.5]), 8)
    assert params.ranges == ((0.0, 1.5),)
    assert params.scale == pytest.approx(3.0 / 255)


def test_weight_minmax_per_channel():
    w = as_tensor([[[[1.0]]], [[[-4.0]]]])
    params = weight_minmax_range(w, 4, Granularity.PER_CHANNEL)
    assert params.ranges == ((0.0, 1.0), (-4.0, 0.0))
    assert len(params.scales) == 2


def test_weight_minmax_full_precision_and_zero_weights(caplog):
    assert not weight_minmax_range(as_tensor([1.0]), None).enabled
    with caplog.at_level("WARNING"):
        params = weight_minmax_range(as_tensor([0.0, 0.0]), 8)
    assert params.scale == pytest.approx(2.0**-24 / 255)
    assert "All-zero weights" in caplog.text


# ---------------------------------------------------------------------------
# Line search
# ---------------------------------------------------------------------------


def test_candidate_ranges_are_sorted_and_straddle_zero():
    X = np.linspace(-1.0, 3.0, 50)
    pairs = candidate_ranges(X, 9)
    magnitudes = [max(-lo, hi) for lo, hi in pairs]
    assert magnitudes == sorted(magnitudes)
    assert len(set(magnitudes)) == len(magnitudes)
    assert all(lo <= 0.0 <= hi for lo, hi in pairs)
    assert magnitudes[-1] == pytest.approx(3.0)


def _exhaustive(X, w, w_hat, bits, grid_points, padding):
    lo = min(float(X.min()), 0.0)
    hi = max(float(X.max()), 0.0)
    grid = np.linspace(lo, hi, grid_points)
    best = None
    for r_min, r_max in itertools.product(grid, grid):
        if not r_min <= 0.0 <= r_max:
            continue
        params = QuantParams.from_range(r_min, r_max, bits)
        value = activation_range_objective(X, w, w_hat, params, padding)
        if best is None or value < best:
            best = value
    return best


def test_line_search_matches_exhaustive_search():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = as_tensor(rng.normal(0.3, 1.0, size=(3, 2, 6, 6)))
        w = as_tensor(rng.normal(size=(2, 2, 3, 3)))
        w_hat = fake_quantize(w, weight_minmax_range(w, 8))
        result = line_search_activation_range(X, w, w_hat, 4, grid_points=20, padding=1)
        expected = _exhaustive(X, w, w_hat, 4, 20, 1)
        assert result.objective == pytest.approx(expected, rel=1e-9)


def test_line_search_no_worse_than_minmax():
    rng = np.random.default_rng(1)
    X = as_tensor(rng.normal(size=(4, 2, 6, 6)))
    w = as_tensor(rng.normal(size=(2, 2, 3, 3)))
    result = line_search_activation_range(X, w, w, 4, grid_points=20, padding=1)
    minmax = QuantParams.from_range(min(0.0, X.min()), max(0.0, X.max()), 4)
    assert result.objective <= activation_range_objective(X, w, w, minmax, 1)


def test_line_search_clips_outliers():
    rng = np.random.default_rng(2)
    X = rng.normal(0.0, 1.0, size=(8, 1, 8, 8))
    X[0, 0, 0, 0] = 12.0
    X = as_tensor(X)
    w = as_tensor(np.ones((1, 1, 1, 1)))
    result = line_search_activation_range(X, w, w, 4, grid_points=50)
    lo, hi = result.params.ranges[0]
    assert max(-lo, hi) < 12.0


def test_line_search_validation():
    w = as_tensor(np.ones((1, 1, 1, 1)))
    X = as_tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(QuantParamsError):
        line_search_activation_range(X, w, w, 0)
    with pytest.raises(CalibrationError):
        line_search_activation_range(X, w, w, 4, grid_points=1)


# ---------------------------------------------------------------------------
# Activation batches
# ---------------------------------------------------------------------------


def test_collect_frame_and_residual_batches():
    model = build_toy_model(depth=2, channels=3, in_channels=1).full_precision()
    clips = _clips()
    frames = collect_activations(model, 1, clips, ActivationSource.FRAME, 3)
    residuals = collect_activations(model, 1, clips, ActivationSource.RESIDUAL, 3)
    assert frames.shape == (12, 3, 10, 10)
    # two keyframes per six-frame clip at period 3
    assert residuals.shape == (8, 3, 10, 10)
    limited = collect_activations(model, 0, clips, "frame", samples=5)
    assert limited.shape[0] == 5


def test_static_clip_residuals_are_zero():
    model = build_toy_model(depth=2, channels=2, in_channels=1).full_precision()
    clips = _clips(magnitude=0.0)
    residuals = collect_activations(model, 1, clips, ActivationSource.RESIDUAL, 3)
    assert not residuals.any()


def test_collect_errors():
    model = build_toy_model(depth=1, channels=1).full_precision()
    with pytest.raises(CalibrationError):
        collect_activations(model, 0, [], ActivationSource.FRAME)
    one_frame = [[as_tensor(np.ones((1, 4, 4)))]]
    with pytest.raises(CalibrationError):
        collect_activations(model, 0, one_frame, ActivationSource.RESIDUAL, 2)


def test_residual_batches_vary_less_than_frames():
    clips = [c.frames for c in generate_clips(SyntheticClipSpec(height=16, width=16), 2)]
    config = CalibrationConfig(
        samples=16, grid_points=8, keyframe_period=2, precision=parse_precision("W8A8|W8A8")
    )
    model = calibrate_model(build_toy_model(depth=2, channels=3, in_channels=1), clips, config)
    for index in range(2):
        frames = collect_activations(model, index, clips, ActivationSource.FRAME, 2)
        residuals = collect_activations(model, index, clips, ActivationSource.RESIDUAL, 2)
        assert variance(residuals) < variance(frames)


def test_upstream_quantization_changes_deeper_batches():
    config = CalibrationConfig(
        samples=8, grid_points=8, keyframe_period=3, precision=parse_precision("W4A4|W4A2")
    )
    clips = _clips()
    model = calibrate_model(build_toy_model(depth=2, channels=3, in_channels=1), clips, config)
    for source in ActivationSource:
        quantized = collect_activations(model, 1, clips, source, 3, 8)
        plain = collect_activations(model, 1, clips, source, 3, 8, quantize_upstream=False)
        assert quantized.shape == plain.shape
        assert not np.array_equal(quantized, plain)

    # the stored keyframe range is the search result on the quantized batch
    layer = model.layers[1]
    frames = collect_activations(model, 1, clips, ActivationSource.FRAME, 3, 8)
    data = slice(0, layer.in_channels)
    searched = line_search_activation_range(
        frames,
        layer.weight,
        layer.quantized_weight(WeightSet.KEYFRAME)[:, data],
        4,
        grid_points=8,
        padding=layer.padding,
    )
    assert searched.params.scales == layer.quant.keyframe_act.scales


# ---------------------------------------------------------------------------
# Whole model
# ---------------------------------------------------------------------------


def test_calibrate_model_sets_every_quantizer():
    model = build_toy_model(depth=2, channels=3, in_channels=1)
    config = CalibrationConfig(
        samples=8, grid_points=8, keyframe_period=3, precision=parse_precision("W8A8|W6A4")
    )
    calibrated = calibrate_model(model, _clips(), config)
    assert calibrated.is_quantized
    for layer in calibrated.layers:
        quant = layer.quant
        assert quant.keyframe_weight.bit_width == 8
        assert quant.keyframe_act.bit_width == 8
        assert quant.residual_weight.bit_width == 6
        assert quant.residual_act.bit_width == 4
        assert quant.keyframe_act.is_consistent()
        assert layer.quantized_weight(WeightSet.RESIDUAL).shape == layer.weight.shape


def test_calibration_is_deterministic():
    config = CalibrationConfig(
        samples=8,
        grid_points=8,
        keyframe_period=3,
        precision=parse_precision("W8A8|W8A{0,4,8}"),
    )
    first = calibrate_model(build_toy_model(depth=2, channels=3, in_channels=1), _clips(), config)
    second = calibrate_model(build_toy_model(depth=2, channels=3, in_channels=1), _clips(), config)
    assert [layer.quant.to_dict() for layer in first.layers] == [
        layer.quant.to_dict() for layer in second.layers
    ]


def test_calibrate_model_pool_and_per_channel():
    model = build_toy_model(depth=2, channels=3, in_channels=1, bias=True)
    config = CalibrationConfig(
        samples=8,
        grid_points=6,
        keyframe_period=2,
        precision=parse_precision("W8A8|W8A{0,2,4}"),
        weight_granularity=Granularity.PER_CHANNEL,
    )
    calibrated = calibrate_model(model, _clips(), config)
    for layer in calibrated.layers:
        pool = layer.quant.residual_act
        assert isinstance(pool, QuantizerPool)
        assert pool.bit_widths == (0, 2, 4)
        assert layer.quant.keyframe_weight.granularity is Granularity.PER_CHANNEL


def test_calibrate_full_precision_and_empty():
    model = build_toy_model(depth=1, channels=1)
    fp = calibrate_model(model, [], CalibrationConfig(precision=parse_precision("FP32")))
    assert not fp.layers[0].quant.keyframe_act.enabled
    with pytest.raises(CalibrationError):
        calibrate_model(model, [], CalibrationConfig())


def test_calibration_config_validation():
    with pytest.raises(CalibrationError):
        CalibrationConfig(samples=0)
    with pytest.raises(CalibrationError):
        CalibrationConfig(grid_points=1)
    with pytest.raises(CalibrationError):
        CalibrationConfig(keyframe_period=0)
