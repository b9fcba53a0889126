"""Async Python client for the run dashboard API.

Wraps the REST endpoints and the SSE event stream with httpx.

Usage:
    async with ResqClient("http://localhost:8050") as client:
        run = await client.submit_run({"precision": "W8A8|W8A{0,4,8}", "mode": "resq-dynamic"})
        async for event in client.stream_events(run["run_id"]):
            print(event)
"""

from __future__ import annotations

import json
from collections.abc import AsyncIterator
from typing import Any

import httpx


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------


class ResqClientError(Exception):
    """Base exception for dashboard client errors."""

    def __init__(self, message: str, status_code: int | None = None):
        super().__init__(message)
        self.status_code = status_code


class RunNotFound(ResqClientError):
    """The run (or layer) does not exist (404)."""


class AlreadyFinished(ResqClientError):
    """The run is no longer running (409)."""


class InvalidSubmission(ResqClientError):
    """The run request was rejected (422)."""


class ExecutorNotConfigured(ResqClientError):
    """The server does not accept runs (503)."""


_STATUS_EXCEPTIONS: dict[int, type[ResqClientError]] = {
    404: RunNotFound,
    409: AlreadyFinished,
    422: InvalidSubmission,
    503: ExecutorNotConfigured,
}


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


def _parse(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


class ResqClient:
    """Async client for the dashboard HTTP API.

    Args:
        base_url: Root URL of the dashboard server.
        _client: Optional pre-built ``httpx.AsyncClient`` (used by tests).
    """

    def __init__(
        self,
        base_url: str = "http://localhost:8050",
        *,
        _client: httpx.AsyncClient | None = None,
    ):
        self._client = _client or httpx.AsyncClient(base_url=base_url)

    async def __aenter__(self) -> ResqClient:
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb) -> None:  # noqa: ANN001
        await self.close()

    async def close(self) -> None:
        await self._client.aclose()

    def _handle_response(self, response: httpx.Response) -> None:
        """Raise a typed exception for non-2xx responses."""
        if response.is_success:
            return
        status = response.status_code
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        exc_cls = _STATUS_EXCEPTIONS.get(status, ResqClientError)
        raise exc_cls(str(detail), status_code=status)

    async def _get(self, url: str) -> Any:
        resp = await self._client.get(url)
        self._handle_response(resp)
        return resp.json()

    # -- runs ----------------------------------------------------------------

    async def health(self) -> dict:
        return await self._get("/api/health")

    async def list_runs(self) -> list[dict]:
        """``GET /api/runs``"""
        return await self._get("/api/runs")

    async def get_run(self, run_id: str) -> dict:
        """``GET /api/runs/{id}``"""
        return await self._get(f"/api/runs/{run_id}")

    async def get_layer(self, run_id: str, layer: int) -> dict:
        """``GET /api/runs/{id}/layers/{layer}``"""
        return await self._get(f"/api/runs/{run_id}/layers/{layer}")

    async def submit_run(self, request: dict[str, Any] | None = None) -> dict:
        """``POST /api/runs``; unspecified fields take the server defaults."""
        resp = await self._client.post("/api/runs", json=request or {})
        self._handle_response(resp)
        return resp.json()

    async def cancel_run(self, run_id: str) -> dict:
        """``POST /api/runs/{id}/cancel``"""
        resp = await self._client.post(f"/api/runs/{run_id}/cancel")
        self._handle_response(resp)
        return resp.json()

    # -- SSE -----------------------------------------------------------------

    async def stream_events(self, run_id: str) -> AsyncIterator[dict]:
        """Yield ``{"event": <type>, "data": <parsed-json>}`` from ``/events``."""
        url = f"/api/runs/{run_id}/events"
        async with self._client.stream("GET", url) as response:
            if not response.is_success:
                await response.aread()
            self._handle_response(response)

            event_type: str | None = None
            data_buf: list[str] = []
            async for line in response.aiter_lines():
                if line.startswith(":"):
                    continue
                if line.startswith("event:"):
                    event_type = line[len("event:") :].strip()
                elif line.startswith("data:"):
                    data_buf.append(line[len("data:") :].strip())
                elif line == "":
                    if data_buf:
                        yield {
                            "event": event_type or "message",
                            "data": _parse("\n".join(data_buf)),
                        }
                    event_type = None
                    data_buf = []

            # stream closed without a trailing blank line
            if data_buf:
                yield {"event": event_type or "message", "data": _parse("\n".join(data_buf))}
