"""Tests for tensor construction, convolution, norms and Raw Tensor Files."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import signal

from resq_video_sim.errors import DimensionError, NonFiniteError, RtfFormatError
from resq_video_sim.tensor_core import (
    add,
    as_tensor,
    channel_norm_map,
    conv2d,
    frobenius_norm,
    mse,
    read_rtf,
    relu,
    sub,
    variance,
    write_rtf,
)


def _loop_conv(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Quadruple-loop cross-correlation used as an oracle."""
    x = np.pad(x.astype(np.float64), ((0, 0), (padding, padding), (padding, padding)))
    c_out, c_in, kh, kw = w.shape
    out_h = x.shape[1] - kh + 1
    out_w = x.shape[2] - kw + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                out[o, i, j] = np.sum(x[:, i : i + kh, j : j + kw] * w[o])
    return out


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def test_as_tensor_is_float32_and_read_only():
    t = as_tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    with pytest.raises(ValueError):
        t[0, 0] = 5.0


def test_as_tensor_rejects_nan_and_inf():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        as_tensor([float("inf")])


def test_as_tensor_rejects_empty_and_scalar():
    with pytest.raises(DimensionError):
        as_tensor(np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        as_tensor(1.0)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def test_conv2d_1x1_single_channel_scales():
    x = as_tensor(np.arange(9).reshape(1, 3, 3))
    w = as_tensor(np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(conv2d(x, w), 2 * np.arange(9).reshape(1, 3, 3))


def test_conv2d_output_extents():
    x = as_tensor(np.ones((2, 7, 5)))
    w = as_tensor(np.ones((3, 2, 3, 3)))
    assert conv2d(x, w).shape == (3, 5, 3)
    assert conv2d(x, w, padding=1).shape == (3, 7, 5)


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3]))
    padding = int(rng.integers(0, 2))
    x = rng.normal(size=(c_in, 6, 7))
    w = rng.normal(size=(c_out, c_in, k, k))
    got = conv2d(as_tensor(x), as_tensor(w), padding)
    np.testing.assert_allclose(
        got, _loop_conv(x.astype(np.float32), w.astype(np.float32), padding), rtol=1e-5, atol=1e-5
    )


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(7)
    x = as_tensor(rng.normal(size=(1, 8, 8)))
    w = as_tensor(rng.normal(size=(1, 1, 3, 3)))
    expected = signal.correlate(x[0].astype(np.float64), w[0, 0].astype(np.float64), mode="same")
    np.testing.assert_allclose(conv2d(x, w, padding=1)[0], expected, rtol=1e-5, atol=1e-5)


def test_conv2d_is_linear():
    rng = np.random.default_rng(3)
    a = as_tensor(rng.normal(size=(2, 6, 6)))
    b = as_tensor(rng.normal(size=(2, 6, 6)))
    w = as_tensor(rng.normal(size=(3, 2, 3, 3)))
    lhs = conv2d(add(a, b), w, 1)
    rhs = add(conv2d(a, w, 1), conv2d(b, w, 1))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


def test_conv2d_batch_matches_per_item():
    rng = np.random.default_rng(4)
    batch = as_tensor(rng.normal(size=(3, 2, 5, 5)))
    w = as_tensor(rng.normal(size=(2, 2, 3, 3)))
    out = conv2d(batch, w, 1)
    for n in range(3):
        np.testing.assert_allclose(out[n], conv2d(batch[n], w, 1), rtol=1e-6)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(as_tensor(np.ones((2, 4, 4))), as_tensor(np.ones((1, 3, 1, 1))))


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(DimensionError):
        conv2d(as_tensor(np.ones((1, 2, 2))), as_tensor(np.ones((1, 1, 3, 3))))


def test_conv2d_rejects_bad_weight_rank():
    with pytest.raises(DimensionError):
        conv2d(as_tensor(np.ones((1, 4, 4))), as_tensor(np.ones((1, 1, 3))))


# ---------------------------------------------------------------------------
# Elementwise and norms
# ---------------------------------------------------------------------------


def test_sub_add_and_shape_check():
    a = as_tensor([[1.0, 2.0]])
    b = as_tensor([[0.5, 0.5]])
    np.testing.assert_array_equal(sub(a, b), [[0.5, 1.5]])
    np.testing.assert_array_equal(add(a, b), [[1.5, 2.5]])
    with pytest.raises(DimensionError):
        sub(a, as_tensor([1.0, 2.0, 3.0]))


def test_relu():
    np.testing.assert_array_equal(relu(as_tensor([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_channel_norm_map():
    x = as_tensor(np.stack([np.full((2, 2), 3.0), np.full((2, 2), 4.0)]))
    np.testing.assert_allclose(channel_norm_map(x), np.full((2, 2), 5.0))


def test_channel_norm_map_requires_channels():
    with pytest.raises(DimensionError):
        channel_norm_map(as_tensor(np.ones((3, 3))))


def test_frobenius_variance_mse():
    x = as_tensor([[3.0, 4.0]])
    assert frobenius_norm(x) == pytest.approx(5.0)
    assert variance(as_tensor([1.0, 3.0])) == pytest.approx(1.0)
    assert mse(as_tensor([1.0, 2.0]), as_tensor([1.0, 4.0])) == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# Raw Tensor Files
# ---------------------------------------------------------------------------


def test_rtf_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    t = as_tensor(rng.normal(size=(2, 3, 4)))
    path = tmp_path / "t.rtf"
    write_rtf(path, t)
    back = read_rtf(path)
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_rtf_header_layout(tmp_path):
    path = tmp_path / "t.rtf"
    write_rtf(path, as_tensor(np.ones((2, 3))))
    raw = path.read_bytes()
    assert raw[:4] == b"RTF1"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert len(raw) == 4 + 4 + 2 * 4 + 6 * 4


def test_rtf_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.rtf"
    path.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(RtfFormatError):
        read_rtf(path)


def test_rtf_rejects_truncated_payload(tmp_path):
    path = tmp_path / "t.rtf"
    write_rtf(path, as_tensor(np.ones((4, 4))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(RtfFormatError):
        read_rtf(path)
