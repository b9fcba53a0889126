"""Tests for BOP accounting and the per-frame report."""

from __future__ import annotations

import csv
import io

import numpy as np
import pytest

from resq_video_sim.bops import (
    GIGA,
    REPORT_COLUMNS,
    BopEntry,
    LayerShape,
    conv_bops,
    mixed_conv_bops,
    policy_overhead_bops,
    sequence_report,
)
from resq_video_sim.errors import DimensionError
from resq_video_sim.model import conv_layer


def _entry(frame: int, layer: int, key: bool, bops: int, policy: int = 0) -> BopEntry:
    return BopEntry(
        frame_index=frame,
        layer=layer,
        is_keyframe=key,
        macs=bops,
        weight_bits=1,
        act_bits=1,
        conv_bops=bops,
        policy_bops=policy,
    )


# ---------------------------------------------------------------------------
# Per-layer costs
# ---------------------------------------------------------------------------


def test_layer_shape_counts_data_channels_only():
    layer = conv_layer(np.ones((4, 2, 3, 3)), padding=1, bias=np.zeros(4))
    shape = LayerShape.from_layer(layer, (5, 6))
    assert shape.in_channels == 2
    assert (shape.out_h, shape.out_w) == (5, 6)
    assert shape.macs_per_pixel == 2 * 3 * 3 * 4
    assert shape.macs == 72 * 30


def test_conv_bops_ratios():
    shape = LayerShape(8, 8, 3, 3, 16, 16)
    assert conv_bops(shape, 4, 4) / conv_bops(shape, 8, 8) == 0.25
    assert conv_bops(shape, 8, 4) / conv_bops(shape, 8, 8) == 0.5
    assert conv_bops(shape, 32, 32) == shape.macs * 1024


@pytest.mark.parametrize("seed", range(100))
def test_mixed_bops_match_per_pixel_loop(seed):
    rng = np.random.default_rng(seed)
    kernel = int(rng.choice([1, 3, 5]))
    out_h, out_w = (int(s) for s in rng.integers(1, 9, size=2))
    c_in, c_out = (int(c) for c in rng.integers(1, 6, size=2))
    shape = LayerShape(c_in, c_out, kernel, kernel, out_h, out_w)
    pool_bits = sorted(int(b) for b in rng.choice([0, 2, 3, 4, 6, 8], size=3, replace=False))
    b_w = int(rng.choice([4, 8]))
    index_map = rng.integers(1, len(pool_bits) + 1, size=(out_h, out_w))
    expected = 0
    for i in range(out_h):
        for j in range(out_w):
            expected += shape.macs_per_pixel * b_w * pool_bits[index_map[i, j] - 1]
    assert mixed_conv_bops(shape, b_w, index_map, pool_bits) == expected


def test_mixed_bops_uniform_map_equals_static():
    shape = LayerShape(2, 2, 3, 3, 4, 4)
    index_map = np.full((4, 4), 2)
    assert mixed_conv_bops(shape, 8, index_map, [0, 4]) == conv_bops(shape, 8, 4)
    assert mixed_conv_bops(shape, 8, np.ones((4, 4), int), [0, 4]) == 0


def test_mixed_bops_rejects_misaligned_map():
    with pytest.raises(DimensionError):
        mixed_conv_bops(LayerShape(1, 1, 3, 3, 4, 4), 8, np.ones((3, 3), int), [2, 4])


def test_policy_overhead():
    assert policy_overhead_bops(16, 8, 8, 3) == 3 * 16 * 8 * 8 * 64


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def test_report_totals_and_amortization():
    entries = [
        _entry(0, 0, True, 100),
        _entry(0, 1, True, 50),
        _entry(1, 0, False, 10, policy=5),
        _entry(1, 1, False, 10, policy=5),
        _entry(2, 0, True, 100),
        _entry(2, 1, True, 50),
    ]
    report = sequence_report(reversed(entries))
    assert [e.frame_index for e in report.entries] == [0, 0, 1, 1, 2, 2]
    assert report.num_frames == 3
    assert report.frame_totals() == [150, 30, 150]
    assert report.frame_totals(include_policy=False) == [150, 20, 150]
    assert report.conv_total == 320
    assert report.policy_total == 10
    assert report.amortized() == pytest.approx(330 / 3)
    assert report.amortized(include_policy=False) == pytest.approx(320 / 3)
    assert report.peak() == 150
    assert report.keyframe_indices == [0, 2]
    assert report.residual_indices == [1]
    assert len(report.layer_entries(1)) == 3


def test_amortized_matches_period_formula():
    # (B_key + (T - 1) * B_res) / T over whole periods
    key, res, period = 640, 160, 4
    entries = [
        _entry(t, 0, t % period == 0, key if t % period == 0 else res)
        for t in range(3 * period)
    ]
    report = sequence_report(entries)
    assert report.amortized() == pytest.approx((key + (period - 1) * res) / period)


def test_report_requires_every_frame():
    with pytest.raises(DimensionError):
        sequence_report([])
    with pytest.raises(DimensionError):
        sequence_report([_entry(0, 0, True, 1), _entry(2, 0, True, 1)])


def test_report_csv():
    report = sequence_report(
        [_entry(0, 0, True, 2_000_000_000), _entry(1, 0, False, 500, policy=500)]
    )
    rows = list(csv.reader(io.StringIO(report.to_csv(frame_mse=[0.0, 0.25]))))
    assert rows[0] == REPORT_COLUMNS
    assert rows[1] == ["0", "1", "0", "2000000000", "0.0"]
    assert rows[2] == ["1", "0", "0", "1000", "0.25"]

    giga = list(csv.reader(io.StringIO(report.to_csv(giga=True))))
    assert float(giga[1][3]) == pytest.approx(2_000_000_000 / GIGA)
    assert giga[1][4] == ""


def test_report_csv_to_path(tmp_path):
    report = sequence_report([_entry(0, 0, True, 7)])
    path = tmp_path / "report.csv"
    report.write_csv(path, frame_mse=[1.5])
    assert path.read_text().splitlines()[1] == "0,1,0,7,1.5"
