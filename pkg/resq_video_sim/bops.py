"""Bit-operation (BOP) accounting.

A convolution costs ``MACs * b_w * b_a`` BOPs.  Per-pixel mixed precision sums
that product over output pixels with the activation bits selected at the
aligned input pixel; 0-bit pixels cost nothing.  The dynamic policy itself is
charged ``n * C * H * W`` MACs at 8x8 bits per residual layer.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, TextIO

import numpy as np

from resq_video_sim.errors import DimensionError

if TYPE_CHECKING:
    from resq_video_sim.model import ConvLayer

POLICY_BITS = 8

GIGA = 1e9

REPORT_COLUMNS = ["frame_index", "is_keyframe", "layer", "bops", "output_mse_vs_fp32"]


@dataclass(frozen=True)
class LayerShape:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    out_h: int
    out_w: int

    @classmethod
    def from_layer(cls, layer: ConvLayer, in_hw: tuple[int, int]) -> LayerShape:
        """Shape of ``layer`` applied to an input of spatial size ``in_hw``.

        Only data channels count; a folded bias channel is free.
        """
        c_out, out_h, out_w = layer.output_shape(in_hw)
        kh, kw = layer.kernel_size
        return cls(layer.in_channels, c_out, kh, kw, out_h, out_w)

    @property
    def macs_per_pixel(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w * self.out_channels

    @property
    def macs(self) -> int:
        return self.macs_per_pixel * self.out_h * self.out_w


def conv_bops(shape: LayerShape, b_w: int, b_a: int) -> int:
    return shape.macs * b_w * b_a


def mixed_conv_bops(
    shape: LayerShape,
    b_w: int,
    index_map: np.ndarray,
    pool_bits: Sequence[int],
) -> int:
    """BOPs with activation bits chosen per pixel by a 1-based ``index_map``."""
    index_map = np.asarray(index_map)
    if index_map.shape != (shape.out_h, shape.out_w):
        raise DimensionError(
            f"Index map {index_map.shape} does not match output grid "
            f"{(shape.out_h, shape.out_w)}; dynamic layers need same padding"
        )
    bits = np.asarray(pool_bits, dtype=np.int64)[index_map - 1]
    return int(bits.sum()) * shape.macs_per_pixel * b_w


def policy_overhead_bops(channels: int, height: int, width: int, pool_size: int) -> int:
    return pool_size * channels * height * width * POLICY_BITS * POLICY_BITS


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BopEntry:
    """Cost of one layer on one frame."""

    frame_index: int
    layer: int
    is_keyframe: bool
    macs: int
    weight_bits: int
    act_bits: int | None
    conv_bops: int
    policy_bops: int = 0
    act_bit_histogram: dict[int, int] | None = None

    @property
    def total_bops(self) -> int:
        return self.conv_bops + self.policy_bops


@dataclass(frozen=True)
class BopReport:
    entries: tuple[BopEntry, ...]
    num_frames: int

    def frame_totals(self, include_policy: bool = True) -> list[int]:
        totals = [0] * self.num_frames
        for e in self.entries:
            totals[e.frame_index] += e.total_bops if include_policy else e.conv_bops
        return totals

    @property
    def conv_total(self) -> int:
        return sum(e.conv_bops for e in self.entries)

    @property
    def policy_total(self) -> int:
        return sum(e.policy_bops for e in self.entries)

    @property
    def total(self) -> int:
        return self.conv_total + self.policy_total

    def amortized(self, include_policy: bool = True) -> float:
        """Average cost per frame over the whole sequence."""
        total = self.total if include_policy else self.conv_total
        return total / self.num_frames

    def peak(self, include_policy: bool = True) -> int:
        return max(self.frame_totals(include_policy))

    @property
    def keyframe_indices(self) -> list[int]:
        return sorted({e.frame_index for e in self.entries if e.is_keyframe})

    @property
    def residual_indices(self) -> list[int]:
        return sorted({e.frame_index for e in self.entries if not e.is_keyframe})

    def layer_entries(self, layer: int) -> list[BopEntry]:
        return [e for e in self.entries if e.layer == layer]

    def write_csv(
        self,
        out: str | Path | TextIO,
        frame_mse: Sequence[float] | None = None,
        giga: bool = False,
    ) -> None:
        """Emit one row per (frame, layer); BOPs optionally in GBOPs."""
        if isinstance(out, (str, Path)):
            with open(out, "w", newline="") as fh:
                self.write_csv(fh, frame_mse, giga)
            return
        writer = csv.writer(out)
        writer.writerow(REPORT_COLUMNS)
        for e in self.entries:
            bops: float | int = e.total_bops / GIGA if giga else e.total_bops
            error = "" if frame_mse is None else repr(float(frame_mse[e.frame_index]))
            writer.writerow([e.frame_index, int(e.is_keyframe), e.layer, bops, error])

    def to_csv(self, frame_mse: Sequence[float] | None = None, giga: bool = False) -> str:
        buf = io.StringIO()
        self.write_csv(buf, frame_mse, giga)
        return buf.getvalue()


def sequence_report(entries: Iterable[BopEntry]) -> BopReport:
    """Collect per-(frame, layer) entries into a report ordered by frame, layer."""
    ordered = tuple(sorted(entries, key=lambda e: (e.frame_index, e.layer)))
    if not ordered:
        raise DimensionError("A report needs at least one entry")
    num_frames = ordered[-1].frame_index + 1
    seen = {e.frame_index for e in ordered}
    if len(seen) != num_frames:
        missing = sorted(set(range(num_frames)) - seen)
        raise DimensionError(f"Frames {missing} have no entries")
    return BopReport(ordered, num_frames)
