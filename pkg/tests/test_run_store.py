"""Tests for run directory writing and the RunStore reader."""

from __future__ import annotations

import json

import pytest

from resq_video_sim.run_executor import EventCaptureHook, RunRequest, execute_run
from resq_video_sim.run_store import (
    MANIFEST,
    POLICY_DIR,
    REPORT,
    RunStore,
    update_manifest,
    write_manifest,
)

DYNAMIC_RUN = {
    "model": {"depth": 1, "channels": 2},
    "clip": {"height": 8, "width": 8, "length": 4},
    "precision": "W8A8|W8A{0,4,8}",
    "mode": "resq-dynamic",
    "period": 2,
    "calibration_clips": 1,
    "samples": 4,
    "grid_points": 4,
}


@pytest.fixture
def results_dir(tmp_path):
    return tmp_path / "runs"


@pytest.fixture
def finished_run(results_dir):
    """A completed dynamic run written by execute_run."""
    run_dir = results_dir / "dyn-0001"
    write_manifest(run_dir, {"run_id": "dyn-0001", "status": "running", "start_time": "t0"})
    hook = EventCaptureHook(history=[], subscribers=[])
    execute_run("dyn-0001", RunRequest(**DYNAMIC_RUN), run_dir, hook)
    return run_dir


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def test_write_run_layout(finished_run):
    assert (finished_run / REPORT).is_file()
    manifest = json.loads((finished_run / MANIFEST).read_text())
    assert manifest["status"] == "completed"
    # start_time from the initial manifest is kept
    assert manifest["start_time"] == "t0"
    assert manifest["layers"] == ["conv0"]
    assert manifest["config"]["mode"] == "resq-dynamic"
    assert manifest["report_units"] == "bops"
    summary = manifest["summary"]
    assert summary["num_frames"] == 4
    assert summary["keyframes"] == [0, 2]
    assert summary["amortized_gbops_with_policy"] > summary["amortized_gbops"]
    assert set(summary["mse_by_distance"]) == {"0", "1"}
    # residual frames 1 and 3 of a single layer
    assert manifest["policy_maps"] == 2
    assert sorted(p.name for p in (finished_run / POLICY_DIR).iterdir()) == [
        "frame_001_layer_00.pgm",
        "frame_003_layer_00.pgm",
    ]


def test_update_manifest_merges(tmp_path):
    write_manifest(tmp_path, {"run_id": "r", "status": "running"})
    merged = update_manifest(tmp_path, status="failed", error="boom")
    assert merged == {"run_id": "r", "status": "failed", "error": "boom"}
    assert json.loads((tmp_path / MANIFEST).read_text()) == merged
    assert not (tmp_path / f"{MANIFEST}.tmp").exists()


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_list_runs(results_dir, finished_run):
    write_manifest(results_dir / "broken", {"status": "running"})
    (results_dir / "broken" / MANIFEST).write_text("{not json")
    (results_dir / "no-manifest").mkdir()
    runs = await RunStore(results_dir).list_runs()
    assert [r["run_id"] for r in runs] == ["dyn-0001"]
    run = runs[0]
    assert run["status"] == "completed"
    assert run["mode"] == "resq-dynamic"
    assert run["precision"] == "W8A8|W8A{0,4,8}"
    assert run["period"] == 2
    assert run["mean_mse"] >= 0.0


@pytest.mark.asyncio
async def test_list_runs_missing_dir(tmp_path):
    assert await RunStore(tmp_path / "absent").list_runs() == []


@pytest.mark.asyncio
async def test_get_run_frames(results_dir, finished_run):
    state = await RunStore(results_dir).get_run("dyn-0001")
    assert state["run_id"] == "dyn-0001"
    assert state["frames_completed"] == 4
    frames = state["frames"]
    assert [f["frame_index"] for f in frames] == [0, 1, 2, 3]
    assert [f["is_keyframe"] for f in frames] == [True, False, True, False]
    assert frames[0]["bops"] > frames[1]["bops"]
    assert all(f["output_mse_vs_fp32"] is not None for f in frames)


@pytest.mark.asyncio
async def test_get_run_without_report(results_dir):
    write_manifest(results_dir / "fresh", {"run_id": "fresh", "status": "running"})
    state = await RunStore(results_dir).get_run("fresh")
    assert state["status"] == "running"
    assert state["frames"] == []
    assert state["frames_completed"] == 0


@pytest.mark.asyncio
async def test_get_run_rejects_escaping_ids(results_dir, finished_run):
    store = RunStore(results_dir)
    write_manifest(results_dir.parent, {"run_id": "outside"})
    assert await store.get_run("..") is None
    assert await store.get_run("dyn-0001/../..") is None
    assert await store.get_run("") is None
    assert await store.get_run("missing") is None


@pytest.mark.asyncio
async def test_get_layer(results_dir, finished_run):
    store = RunStore(results_dir)
    layer = await store.get_layer("dyn-0001", 0)
    assert layer["name"] == "conv0"
    assert len(layer["rows"]) == 4
    assert [p["frame_index"] for p in layer["policy"]] == [1, 3]
    for entry in layer["policy"]:
        assert sum(entry["bit_histogram"].values()) == 64
        assert set(entry["bit_histogram"]) <= {"0", "4", "8"}
        assert 0.0 <= entry["mean_bits"] <= 8.0
    assert await store.get_layer("dyn-0001", 5) is None
    assert await store.get_layer("..", 0) is None


@pytest.mark.asyncio
async def test_get_layer_skips_unreadable_maps(results_dir, finished_run, caplog):
    (finished_run / POLICY_DIR / "frame_001_layer_00.pgm").write_bytes(b"P2 garbage")
    with caplog.at_level("WARNING"):
        layer = await RunStore(results_dir).get_layer("dyn-0001", 0)
    assert [p["frame_index"] for p in layer["policy"]] == [3]
    assert "Skipping unreadable policy map" in caplog.text
