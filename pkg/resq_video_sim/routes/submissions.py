"""Run submission endpoint.

POST /api/runs  validate a synthetic run request and start it in the background.
"""

from __future__ import annotations

import uuid
from datetime import datetime, timezone

from fastapi import APIRouter, HTTPException, Request

from resq_video_sim.engine import InferenceMode
from resq_video_sim.notation import parse_precision
from resq_video_sim.run_executor import RunRequest
from resq_video_sim.run_store import write_manifest

router = APIRouter(prefix="/api/runs", tags=["submissions"])


@router.post("", status_code=201)
async def submit_run(request: Request, submission: RunRequest):
    """Write the initial manifest and start the run; returns immediately."""
    executor = getattr(request.app.state, "run_executor", None)
    if executor is None:
        raise HTTPException(status_code=503, detail="Run executor not available")

    precision = parse_precision(submission.precision)
    if submission.mode is InferenceMode.RESQ_DYNAMIC and not precision.uses_pool:
        raise HTTPException(
            status_code=422,
            detail=f"Mode {submission.mode.value} needs a residual pool, "
            f"got {submission.precision}",
        )
    if submission.mode is not InferenceMode.FRAME and submission.period < 2:
        raise HTTPException(
            status_code=422, detail="Residual modes need a keyframe period >= 2"
        )
    if submission.model.in_channels not in (None, submission.clip.channels):
        raise HTTPException(
            status_code=422,
            detail=f"Model expects {submission.model.in_channels} input channels, "
            f"clip has {submission.clip.channels}",
        )
    run_id = f"{submission.mode.value}-{uuid.uuid4().hex[:8]}"
    run_dir = request.app.state.run_store.run_dir(run_id)
    write_manifest(
        run_dir,
        {
            "run_id": run_id,
            "config": submission.model_dump(mode="json"),
            "status": "running",
            "start_time": datetime.now(timezone.utc).isoformat(),
        },
    )
    await executor.start(run_id=run_id, request=submission, run_dir=str(run_dir))
    return {"run_id": run_id, "status": "running", "run_dir": str(run_dir)}
