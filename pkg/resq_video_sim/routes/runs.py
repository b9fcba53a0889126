"""Run result endpoints.

GET /api/runs                          list run summaries
GET /api/runs/{run_id}                 manifest plus per-frame totals
GET /api/runs/{run_id}/layers/{layer}  per-layer BOP rows and policy statistics
"""

from __future__ import annotations

from fastapi import APIRouter, HTTPException, Request

router = APIRouter(prefix="/api/runs", tags=["runs"])


@router.get("")
async def list_runs(request: Request):
    return await request.app.state.run_store.list_runs()


@router.get("/{run_id}")
async def get_run(request: Request, run_id: str):
    state = await request.app.state.run_store.get_run(run_id)
    if state is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    executor = getattr(request.app.state, "run_executor", None)
    if executor is not None:
        live = executor.get_status(run_id)
        if live is not None:
            state["status"] = live
    return state


@router.get("/{run_id}/layers/{layer}")
async def get_layer(request: Request, run_id: str, layer: int):
    store = request.app.state.run_store
    if await store.get_run(run_id) is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    result = await store.get_layer(run_id, layer)
    if result is None:
        raise HTTPException(status_code=404, detail=f"Layer {layer} not found")
    return result
