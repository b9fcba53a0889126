"""Run control endpoints: cancellation and the SSE event stream.

POST /api/runs/{run_id}/cancel
GET  /api/runs/{run_id}/events
"""

from __future__ import annotations

import asyncio
import json

from fastapi import APIRouter, HTTPException, Request
from starlette.responses import StreamingResponse

from resq_video_sim.run_executor import FINISHED_STATUSES

router = APIRouter(prefix="/api/runs", tags=["control"])

TERMINAL_EVENTS = frozenset({"run:complete", "run:failed", "run:cancelled"})

_SSE_HEADERS = {
    "Cache-Control": "no-cache",
    "Connection": "keep-alive",
    "X-Accel-Buffering": "no",
}


def _get_executor(request: Request):
    executor = getattr(request.app.state, "run_executor", None)
    if executor is None:
        raise HTTPException(status_code=503, detail="Run executor not available")
    return executor


def _frame(item: dict) -> str:
    data = json.dumps(item["data"])
    return f"id: {item.get('ts', '')}\nevent: {item['event']}\ndata: {data}\n\n"


def _connected(run_id: str) -> str:
    return f"event: connected\ndata: {json.dumps({'run_id': run_id})}\nretry: 2000\n\n"


@router.post("/{run_id}/cancel")
async def cancel_run(request: Request, run_id: str):
    """404 for unknown runs, 409 when the run is no longer running."""
    executor = _get_executor(request)

    status = executor.get_status(run_id)
    if status is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")

    if not executor.cancel(run_id):
        raise HTTPException(
            status_code=409, detail=f"Run {run_id} is {status}, cannot cancel"
        )
    return {"run_id": run_id, "status": "cancelling"}


@router.get("/{run_id}/events")
async def run_events(request: Request, run_id: str):
    """Stream run events as Server-Sent Events.

    Finished runs replay their history and close.  Running runs replay the
    history captured at subscribe time, then follow the live queue until a
    terminal event or a client disconnect.  Each frame's ``id:`` is the UTC
    timestamp of the event.
    """
    executor = _get_executor(request)

    status = executor.get_status(run_id)
    if status is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    history = executor.event_history.get(run_id)
    if history is None:
        raise HTTPException(status_code=404, detail=f"No event stream for {run_id}")

    if status in FINISHED_STATUSES:
        snapshot = list(history)

        async def replay_generator():
            yield _connected(run_id)
            for item in snapshot:
                yield _frame(item)

        return StreamingResponse(
            replay_generator(), media_type="text/event-stream", headers=_SSE_HEADERS
        )

    snapshot, queue = executor.subscribe(run_id)

    async def event_generator():
        try:
            yield _connected(run_id)
            for item in snapshot:
                yield _frame(item)
                if item["event"] in TERMINAL_EVENTS:
                    return

            while True:
                try:
                    item = await asyncio.wait_for(queue.get(), timeout=30.0)
                except asyncio.TimeoutError:
                    if await request.is_disconnected():
                        return
                    yield ": keepalive\n\n"
                    continue
                yield _frame(item)
                if item["event"] in TERMINAL_EVENTS:
                    return
        finally:
            executor.unsubscribe(run_id, queue)

    return StreamingResponse(
        event_generator(), media_type="text/event-stream", headers=_SSE_HEADERS
    )
