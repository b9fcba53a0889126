"""Read and write run result directories.

A run directory holds::

    <results_dir>/<run_id>/
        manifest.json                 configuration, status, summary
        report.csv                    one row per (frame, layer)
        policy/frame_TTT_layer_LL.pgm selected bits per pixel (dynamic runs)

The CLI ``run`` command and the background executor both write this layout;
:class:`RunStore` serves it to the dashboard.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from resq_video_sim.bops import GIGA
from resq_video_sim.dynamic_policy import read_pgm, write_pgm
from resq_video_sim.engine import SequenceResult
from resq_video_sim.model import ModelSpec

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
REPORT = "report.csv"
POLICY_DIR = "policy"

_POLICY_NAME = re.compile(r"frame_(\d+)_layer_(\d+)\.pgm$")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _read_json(path: Path) -> dict[str, Any] | None:
    """Read a JSON file, returning None on any error."""
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None


def _read_report(path: Path) -> list[dict[str, Any]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError:
        return []
    return [
        {
            "frame_index": int(row["frame_index"]),
            "is_keyframe": row["is_keyframe"] == "1",
            "layer": int(row["layer"]),
            "bops": float(row["bops"]),
            "output_mse_vs_fp32": (
                float(row["output_mse_vs_fp32"]) if row["output_mse_vs_fp32"] else None
            ),
        }
        for row in rows
    ]


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def summarize_result(result: SequenceResult) -> dict[str, Any]:
    report = result.report
    return {
        "num_frames": report.num_frames,
        "keyframes": report.keyframe_indices,
        "amortized_gbops": report.amortized(include_policy=False) / GIGA,
        "amortized_gbops_with_policy": report.amortized() / GIGA,
        "peak_gbops": report.peak() / GIGA,
        "mean_mse": result.mean_mse,
        "mse_by_distance": {str(d): v for d, v in result.mse_by_distance().items()},
    }


def write_manifest(run_dir: str | Path, manifest: dict[str, Any]) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tmp = run_dir / f"{MANIFEST}.tmp"
    tmp.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    tmp.replace(run_dir / MANIFEST)


def update_manifest(run_dir: str | Path, **changes: Any) -> dict[str, Any]:
    """Merge ``changes`` into an existing manifest (or start a new one)."""
    manifest = _read_json(Path(run_dir) / MANIFEST) or {}
    manifest.update(changes)
    write_manifest(run_dir, manifest)
    return manifest


def write_policy_maps(
    out_dir: str | Path, model: ModelSpec, result: SequenceResult
) -> list[Path]:
    """One PGM per (residual frame, layer); pixel value = selected bits."""
    paths = []
    for t, maps in enumerate(result.index_maps):
        if maps is None:
            continue
        for index, index_map in enumerate(maps):
            pool = model.layers[index].require_quant().residual_act
            path = Path(out_dir) / f"frame_{t:03d}_layer_{index:02d}.pgm"
            write_pgm(path, index_map.bit_map(pool), max(pool.bit_widths))
            paths.append(path)
    return paths


def write_run(
    run_dir: str | Path,
    config: dict[str, Any],
    model: ModelSpec,
    result: SequenceResult,
    dump_policy: bool = True,
    giga: bool = False,
) -> dict[str, Any]:
    """Write report, policy maps and a completed manifest for ``result``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    result.report.write_csv(run_dir / REPORT, result.frame_mse, giga=giga)
    policy_maps = write_policy_maps(run_dir / POLICY_DIR, model, result) if dump_policy else []
    manifest = update_manifest(
        run_dir,
        run_id=run_dir.name,
        config=config,
        status="completed",
        end_time=_now(),
        layers=[layer.name for layer in model.layers],
        summary=summarize_result(result),
        policy_maps=len(policy_maps),
        report_units="gbops" if giga else "bops",
    )
    logger.info("Wrote run %s (%d frames)", run_dir.name, result.report.num_frames)
    return manifest


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


class RunStore:
    """Read run directories below ``results_dir``."""

    def __init__(self, results_dir: str | Path) -> None:
        self.results_dir = Path(results_dir).expanduser()

    def run_dir(self, run_id: str) -> Path:
        return self.results_dir / run_id

    def _find_run_dirs(self) -> list[Path]:
        if not self.results_dir.is_dir():
            return []
        return sorted(
            child
            for child in self.results_dir.iterdir()
            if child.is_dir() and (child / MANIFEST).is_file()
        )

    def _resolve(self, run_id: str) -> Path | None:
        # ids are plain directory names; reject anything that could escape
        if not run_id or "/" in run_id or run_id in (".", ".."):
            return None
        path = self.run_dir(run_id)
        return path if (path / MANIFEST).is_file() else None

    async def list_runs(self) -> list[dict[str, Any]]:
        runs = []
        for run_dir in self._find_run_dirs():
            manifest = _read_json(run_dir / MANIFEST)
            if manifest is None:
                continue
            config = manifest.get("config", {})
            summary = manifest.get("summary") or {}
            runs.append(
                {
                    "run_id": run_dir.name,
                    "status": manifest.get("status", "unknown"),
                    "mode": config.get("mode"),
                    "precision": config.get("precision"),
                    "period": config.get("period"),
                    "amortized_gbops": summary.get("amortized_gbops"),
                    "mean_mse": summary.get("mean_mse"),
                    "start_time": manifest.get("start_time", ""),
                }
            )
        return runs

    async def get_run(self, run_id: str) -> dict[str, Any] | None:
        run_dir = self._resolve(run_id)
        if run_dir is None:
            return None
        manifest = _read_json(run_dir / MANIFEST)
        if manifest is None:
            return None
        rows = _read_report(run_dir / REPORT)
        frames: dict[int, dict[str, Any]] = {}
        for row in rows:
            frame = frames.setdefault(
                row["frame_index"],
                {
                    "frame_index": row["frame_index"],
                    "is_keyframe": row["is_keyframe"],
                    "bops": 0.0,
                    "output_mse_vs_fp32": row["output_mse_vs_fp32"],
                },
            )
            frame["bops"] += row["bops"]
        return {
            **manifest,
            "run_id": run_id,
            "frames": [frames[t] for t in sorted(frames)],
            "frames_completed": len(frames),
        }

    async def get_layer(self, run_id: str, layer: int) -> dict[str, Any] | None:
        """Per-layer BOP rows and the mean selected bits per residual frame."""
        run_dir = self._resolve(run_id)
        if run_dir is None:
            return None
        manifest = _read_json(run_dir / MANIFEST) or {}
        names = manifest.get("layers", [])
        rows = [r for r in _read_report(run_dir / REPORT) if r["layer"] == layer]
        if not rows and not 0 <= layer < len(names):
            return None

        policy = []
        for path in sorted((run_dir / POLICY_DIR).glob(f"frame_*_layer_{layer:02d}.pgm")):
            match = _POLICY_NAME.search(path.name)
            if match is None:
                continue
            try:
                bits = read_pgm(path)
            except (OSError, ValueError) as exc:
                logger.warning("Skipping unreadable policy map %s: %s", path, exc)
                continue
            values, counts = np.unique(bits, return_counts=True)
            policy.append(
                {
                    "frame_index": int(match.group(1)),
                    "mean_bits": float(bits.mean()),
                    "bit_histogram": {str(int(v)): int(c) for v, c in zip(values, counts)},
                }
            )
        return {
            "run_id": run_id,
            "layer": layer,
            "name": names[layer] if 0 <= layer < len(names) else None,
            "rows": rows,
            "policy": policy,
        }
