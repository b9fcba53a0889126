#!/usr/bin/env python3
"""Generate sample run directories for dashboard testing.

Writes one completed run per inference mode, plus a cancelled run, so the
dashboard can show frame-level BOPs, residual errors and policy maps.

Usage:
    python scripts/generate_sample_runs.py [RESULTS_DIR]

Default output: /tmp/resq-runs
    sample-frame          -- W8A4 frame-by-frame baseline
    sample-pairwise       -- W8A8|W8A4 residuals against the keyframe
    sample-recurrent      -- W8A8|W8A4 frame-to-frame residuals
    sample-dynamic        -- W8A8|W8A{0,4,8} with per-pixel policy maps
    sample-cancelled      -- cancelled before its first frame
"""

from __future__ import annotations

import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from resq_video_sim.run_executor import EventCaptureHook, RunRequest, execute_run
from resq_video_sim.run_store import update_manifest, write_manifest

DEFAULT_DIR = "/tmp/resq-runs"

CLIP = {"pattern": "translating-square", "height": 32, "width": 32, "length": 12, "magnitude": 2.0}
MODEL = {"depth": 3, "channels": 8}

SAMPLES: dict[str, dict] = {
    "sample-frame": {"mode": "frame", "precision": "W8A4", "period": 1},
    "sample-pairwise": {"mode": "resq-pairwise", "precision": "W8A8|W8A4", "period": 4},
    "sample-recurrent": {"mode": "resq-recurrent", "precision": "W8A8|W8A4", "period": 4},
    "sample-dynamic": {
        "mode": "resq-dynamic",
        "precision": "W8A8|W8A{0,4,8}",
        "period": 4,
        "tau": 0.01,
    },
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _generate_run(results_dir: Path, run_id: str, fields: dict) -> None:
    run_dir = results_dir / run_id
    if run_dir.exists():
        shutil.rmtree(run_dir)
    request = RunRequest(model=MODEL, clip=CLIP, **fields)
    write_manifest(
        run_dir,
        {
            "run_id": run_id,
            "config": request.model_dump(mode="json"),
            "status": "running",
            "start_time": _now(),
        },
    )
    history: list[dict] = []
    summary = execute_run(run_id, request, run_dir, EventCaptureHook(history, []))
    print(f"\n  Generated: {run_dir}")
    print(f"    Mode:      {fields['mode']} {fields['precision']} (T={fields['period']})")
    print(f"    GBOPs:     {summary['amortized_gbops']:.4f}/frame amortized")
    print(f"    Mean MSE:  {summary['mean_mse']:.3e}")


def _generate_cancelled(results_dir: Path) -> None:
    run_dir = results_dir / "sample-cancelled"
    if run_dir.exists():
        shutil.rmtree(run_dir)
    request = RunRequest(model=MODEL, clip=CLIP, mode="resq-pairwise", precision="W8A8|W4A4")
    write_manifest(
        run_dir,
        {
            "run_id": "sample-cancelled",
            "config": request.model_dump(mode="json"),
            "status": "running",
            "start_time": _now(),
        },
    )
    update_manifest(run_dir, status="cancelled", end_time=_now())
    print(f"\n  Generated: {run_dir} [cancelled]")


def generate_all(results_dir: Path) -> None:
    print("Generating sample runs for dashboard testing...")
    for run_id, fields in SAMPLES.items():
        _generate_run(results_dir, run_id, fields)
    _generate_cancelled(results_dir)

    print("\n" + "=" * 60)
    print("To start the dashboard with these runs:")
    print("=" * 60)
    print(f"\n  RESQ_RESULTS_DIR={results_dir} uv run resq-dashboard")
    print()


if __name__ == "__main__":
    generate_all(Path(sys.argv[1] if len(sys.argv) > 1 else DEFAULT_DIR))
