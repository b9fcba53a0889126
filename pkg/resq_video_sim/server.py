"""FastAPI server for browsing and launching simulator runs.

Run directories are read from (and submitted runs written to) the results
directory, resolved as ``--results-dir``, then ``RESQ_RESULTS_DIR``, then
``/tmp/resq-runs``.
"""

from __future__ import annotations

import argparse
import os

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from resq_video_sim.routes.control import router as control_router
from resq_video_sim.routes.runs import router as runs_router
from resq_video_sim.routes.submissions import router as submissions_router
from resq_video_sim.routes.ws import router as ws_router
from resq_video_sim.run_executor import RunExecutor
from resq_video_sim.run_store import RunStore

DEFAULT_RESULTS_DIR = "/tmp/resq-runs"


def create_app(*, results_dir: str = DEFAULT_RESULTS_DIR, executor: bool = True) -> FastAPI:
    """Create the application.

    Args:
        results_dir: Directory holding one sub-directory per run.
        executor: Accept run submissions; without it the API is read-only.
    """
    app = FastAPI(title="ResQ Video Simulator", version="0.1.0")
    app.state.run_store = RunStore(results_dir)
    if executor:
        app.state.run_executor = RunExecutor()

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["http://localhost:5173", "http://localhost:3000"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/api/health")
    async def health():
        return {
            "status": "ok",
            "results_dir": str(app.state.run_store.results_dir),
            "executor": hasattr(app.state, "run_executor"),
        }

    app.include_router(runs_router)
    app.include_router(submissions_router)
    app.include_router(control_router)
    app.include_router(ws_router)
    return app


def main():
    """CLI entry point: ``resq-dashboard [--results-dir DIR] [--port PORT]``."""
    parser = argparse.ArgumentParser(description="ResQ run dashboard")
    parser.add_argument(
        "--port", type=int, default=8050, help="Server port (default: 8050)"
    )
    parser.add_argument(
        "--host", default="127.0.0.1", help="Bind address (default: 127.0.0.1)"
    )
    parser.add_argument(
        "--results-dir", default=None, help="Run results directory"
    )
    parser.add_argument(
        "--read-only", action="store_true", help="Disable run submission"
    )
    args = parser.parse_args()

    # CLI flags take precedence; environment variables are fallbacks
    results_dir = (
        args.results_dir or os.environ.get("RESQ_RESULTS_DIR") or DEFAULT_RESULTS_DIR
    )
    app = create_app(results_dir=results_dir, executor=not args.read_only)
    uvicorn.run(app, host=args.host, port=args.port)


if __name__ == "__main__":
    main()
