"""WebSocket endpoint for live run state.

Clients connect to ``/ws/runs/{run_id}`` and receive a JSON snapshot of the
run whenever it changes.  The store is polled every ``POLL_SECONDS``.
"""

from __future__ import annotations

import asyncio
import json
import logging

from fastapi import APIRouter, WebSocket, WebSocketDisconnect

logger = logging.getLogger(__name__)

router = APIRouter()

POLL_SECONDS = 1.0


def _state_fingerprint(state: dict) -> str:
    return f"{state.get('status')}:{state.get('frames_completed')}:{state.get('error')}"


@router.websocket("/ws/runs/{run_id}")
async def run_ws(websocket: WebSocket, run_id: str) -> None:
    await websocket.accept()
    last_fingerprint: str | None = None
    app = websocket.app

    try:
        while True:
            state = await app.state.run_store.get_run(run_id)
            executor = getattr(app.state, "run_executor", None)
            if state is not None and executor is not None:
                live = executor.get_status(run_id)
                if live is not None:
                    state["status"] = live
                    history = executor.event_history.get(run_id, [])
                    state["frames_completed"] = max(
                        state["frames_completed"],
                        sum(1 for e in history if e["event"] == "run:frame"),
                    )

            if state is not None:
                fp = _state_fingerprint(state)
                if fp != last_fingerprint:
                    await websocket.send_text(json.dumps(state))
                    last_fingerprint = fp

            await asyncio.sleep(POLL_SECONDS)
    except WebSocketDisconnect:
        logger.debug("WebSocket client disconnected for run %s", run_id)
    except Exception:
        logger.exception("WebSocket error for run %s", run_id)
