"""Tests for the dashboard API client.

Uses httpx.MockTransport to test all client methods without a running server.
"""

from __future__ import annotations

import json

import httpx
import pytest

from resq_video_sim.client import (
    AlreadyFinished,
    ExecutorNotConfigured,
    InvalidSubmission,
    ResqClient,
    ResqClientError,
    RunNotFound,
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _make_client(handler) -> ResqClient:
    """Build a ResqClient backed by a mock transport."""
    transport = httpx.MockTransport(handler)
    mock_httpx = httpx.AsyncClient(transport=transport, base_url="http://test")
    return ResqClient(_client=mock_httpx)


def _sse_body(*events: tuple[str, dict]) -> str:
    parts: list[str] = []
    for event_type, data in events:
        parts.append(f"event: {event_type}")
        parts.append(f"data: {json.dumps(data)}")
        parts.append("")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Happy path
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_health():
    def handler(request: httpx.Request) -> httpx.Response:
        assert request.url.path == "/api/health"
        return httpx.Response(200, json={"status": "ok"})

    client = _make_client(handler)
    assert await client.health() == {"status": "ok"}
    await client.close()


@pytest.mark.asyncio
async def test_list_runs():
    payload = [{"run_id": "r1"}]

    def handler(request: httpx.Request) -> httpx.Response:
        assert request.url.path == "/api/runs"
        assert request.method == "GET"
        return httpx.Response(200, json=payload)

    client = _make_client(handler)
    assert await client.list_runs() == payload
    await client.close()


@pytest.mark.asyncio
async def test_get_run_and_layer():
    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.path == "/api/runs/r1":
            return httpx.Response(200, json={"run_id": "r1", "frames": []})
        assert request.url.path == "/api/runs/r1/layers/2"
        return httpx.Response(200, json={"layer": 2, "policy": []})

    client = _make_client(handler)
    assert (await client.get_run("r1"))["run_id"] == "r1"
    assert (await client.get_layer("r1", 2))["layer"] == 2
    await client.close()


@pytest.mark.asyncio
async def test_submit_run():
    payload = {"run_id": "resq-dynamic-1234abcd", "status": "running"}

    def handler(request: httpx.Request) -> httpx.Response:
        assert request.url.path == "/api/runs"
        assert request.method == "POST"
        body = json.loads(request.content)
        assert body == {"precision": "W8A8|W8A{0,4,8}", "mode": "resq-dynamic"}
        return httpx.Response(201, json=payload)

    client = _make_client(handler)
    result = await client.submit_run({"precision": "W8A8|W8A{0,4,8}", "mode": "resq-dynamic"})
    assert result == payload
    await client.close()


@pytest.mark.asyncio
async def test_submit_run_defaults():
    def handler(request: httpx.Request) -> httpx.Response:
        assert json.loads(request.content) == {}
        return httpx.Response(201, json={"run_id": "r2", "status": "running"})

    client = _make_client(handler)
    assert (await client.submit_run())["run_id"] == "r2"
    await client.close()


@pytest.mark.asyncio
async def test_cancel_run():
    def handler(request: httpx.Request) -> httpx.Response:
        assert request.url.path == "/api/runs/r1/cancel"
        assert request.method == "POST"
        return httpx.Response(200, json={"run_id": "r1", "status": "cancelling"})

    client = _make_client(handler)
    assert (await client.cancel_run("r1"))["status"] == "cancelling"
    await client.close()


# ---------------------------------------------------------------------------
# Error handling
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    ("status", "exc_cls"),
    [
        (404, RunNotFound),
        (409, AlreadyFinished),
        (422, InvalidSubmission),
        (503, ExecutorNotConfigured),
    ],
)
@pytest.mark.asyncio
async def test_status_codes_map_to_exceptions(status, exc_cls):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(status, json={"detail": f"status {status}"})

    client = _make_client(handler)
    with pytest.raises(exc_cls) as exc_info:
        await client.submit_run({})
    assert exc_info.value.status_code == status
    assert f"status {status}" in str(exc_info.value)
    await client.close()


@pytest.mark.asyncio
async def test_generic_server_error():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(500, text="Internal server error")

    client = _make_client(handler)
    with pytest.raises(ResqClientError) as exc_info:
        await client.list_runs()
    assert exc_info.value.status_code == 500
    assert type(exc_info.value) is ResqClientError
    assert "Internal server error" in str(exc_info.value)
    await client.close()


# ---------------------------------------------------------------------------
# SSE
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_stream_events():
    sse_text = _sse_body(
        ("connected", {"run_id": "r1"}),
        ("run:frame", {"frame_index": 0, "is_keyframe": True}),
        ("run:complete", {"status": "completed"}),
    )

    def handler(request: httpx.Request) -> httpx.Response:
        assert request.url.path == "/api/runs/r1/events"
        return httpx.Response(
            200, content=sse_text, headers={"content-type": "text/event-stream"}
        )

    client = _make_client(handler)
    events = [e async for e in client.stream_events("r1")]
    assert [e["event"] for e in events] == ["connected", "run:frame", "run:complete"]
    assert events[1]["data"] == {"frame_index": 0, "is_keyframe": True}
    await client.close()


@pytest.mark.asyncio
async def test_stream_events_skips_comments_and_keeps_raw_data():
    lines = "\n".join(
        [
            ": keepalive",
            "id: 2026-02-25T00:00:00+00:00",
            "event: run:frame",
            'data: {"frame_index": 1}',
            "",
            "data: not json",
        ]
    )

    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(
            200, content=lines, headers={"content-type": "text/event-stream"}
        )

    client = _make_client(handler)
    events = [e async for e in client.stream_events("r1")]
    assert events == [
        {"event": "run:frame", "data": {"frame_index": 1}},
        {"event": "message", "data": "not json"},
    ]
    await client.close()


@pytest.mark.asyncio
async def test_stream_events_not_found():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(404, json={"detail": "Run r9 not found"})

    client = _make_client(handler)
    with pytest.raises(RunNotFound):
        async for _ in client.stream_events("r9"):
            pass
    await client.close()


@pytest.mark.asyncio
async def test_context_manager():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json=[])

    async with _make_client(handler) as client:
        assert await client.list_runs() == []
    assert client._client.is_closed
