"""Tests for the run result REST endpoints."""

import pytest
from httpx import ASGITransport, AsyncClient

from resq_video_sim.run_executor import EventCaptureHook, RunRequest, execute_run
from resq_video_sim.server import create_app

SMALL_RUN = {
    "model": {"depth": 2, "channels": 2},
    "clip": {"height": 8, "width": 8, "length": 4},
    "precision": "W8A8|W8A4",
    "period": 2,
    "calibration_clips": 1,
    "samples": 4,
    "grid_points": 4,
}


@pytest.fixture
def app(tmp_path):
    hook = EventCaptureHook(history=[], subscribers=[])
    execute_run("pairwise-0001", RunRequest(**SMALL_RUN), tmp_path / "pairwise-0001", hook)
    return create_app(results_dir=str(tmp_path))


@pytest.fixture
async def client(app):
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as c:
        yield c


@pytest.mark.asyncio
async def test_list_runs(client):
    resp = await client.get("/api/runs")
    assert resp.status_code == 200
    body = resp.json()
    assert [r["run_id"] for r in body] == ["pairwise-0001"]
    assert body[0]["mode"] == "resq-pairwise"
    assert body[0]["amortized_gbops"] > 0


@pytest.mark.asyncio
async def test_list_runs_empty(tmp_path):
    app = create_app(results_dir=str(tmp_path / "empty"))
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as c:
        resp = await c.get("/api/runs")
    assert resp.json() == []


@pytest.mark.asyncio
async def test_get_run(client):
    resp = await client.get("/api/runs/pairwise-0001")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "completed"
    assert body["layers"] == ["conv0", "conv1"]
    assert len(body["frames"]) == 4
    assert body["summary"]["keyframes"] == [0, 2]


@pytest.mark.asyncio
async def test_get_run_prefers_live_status(app, client):
    app.state.run_executor.active_runs["pairwise-0001"] = {"status": "cancelling", "run_dir": ""}
    resp = await client.get("/api/runs/pairwise-0001")
    assert resp.json()["status"] == "cancelling"


@pytest.mark.asyncio
async def test_get_run_not_found(client):
    resp = await client.get("/api/runs/nonexistent")
    assert resp.status_code == 404


@pytest.mark.asyncio
async def test_get_layer(client):
    resp = await client.get("/api/runs/pairwise-0001/layers/1")
    assert resp.status_code == 200
    body = resp.json()
    assert body["name"] == "conv1"
    assert [r["frame_index"] for r in body["rows"]] == [0, 1, 2, 3]
    # static residual precision writes no policy maps
    assert body["policy"] == []


@pytest.mark.asyncio
async def test_get_layer_not_found(client):
    assert (await client.get("/api/runs/pairwise-0001/layers/7")).status_code == 404
    assert (await client.get("/api/runs/nonexistent/layers/0")).status_code == 404
    assert (await client.get("/api/runs/pairwise-0001/layers/abc")).status_code == 422
