"""Background run execution manager.

Runs submitted through the HTTP API are calibrated and evaluated in a worker
thread, writing results to a run directory where :class:`RunStore` picks them
up.  Progress is published as events that SSE clients can replay and follow.
"""

from __future__ import annotations

import asyncio
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field, field_validator

from resq_video_sim.calibration import CalibrationConfig, calibrate_model
from resq_video_sim.dynamic_policy import DEFAULT_TAU, PolicyConfig
from resq_video_sim.engine import InferenceMode, ScheduleConfig, run_sequence
from resq_video_sim.errors import RunCancelled
from resq_video_sim.notation import parse_precision
from resq_video_sim.quantizer import Granularity
from resq_video_sim.run_store import update_manifest, write_run
from resq_video_sim.synthetic import (
    SyntheticClipSpec,
    ToyModelSpec,
    build_from_spec,
    generate_clip,
    generate_clips,
)
from resq_video_sim.tensor_core import Tensor

logger = logging.getLogger(__name__)

FINISHED_STATUSES = frozenset({"completed", "failed", "cancelled"})


class RunRequest(BaseModel):
    """A synthetic run: toy model, clip, precision, mode and schedule."""

    model: ToyModelSpec = Field(default_factory=ToyModelSpec)
    clip: SyntheticClipSpec = Field(default_factory=SyntheticClipSpec)
    precision: str = "W8A8|W8A4"
    mode: InferenceMode = InferenceMode.RESQ_PAIRWISE
    period: int = Field(default=4, ge=1)
    tau: float = DEFAULT_TAU
    calibration_clips: int = Field(default=2, ge=1)
    samples: int = Field(default=64, ge=1)
    grid_points: int = Field(default=20, ge=2)
    weight_granularity: Granularity = Granularity.PER_TENSOR
    dump_policy: bool = True

    @field_validator("precision")
    @classmethod
    def _precision_parses(cls, value: str) -> str:
        parse_precision(value)
        return value

    @field_validator("tau")
    @classmethod
    def _tau_is_number(cls, value: float) -> float:
        if value != value:
            raise ValueError("tau must be a number")
        return value


class EventCaptureHook:
    """Captures run events into an append-only history and fans out to subscribers.

    ``emit`` is called from the worker thread; when ``loop`` is given the
    queue puts are scheduled on that loop, since asyncio queues are not
    thread-safe.  The history append and the fan-out happen under ``lock``,
    the same lock :meth:`RunExecutor.subscribe` holds while it snapshots the
    history and registers its queue, so every event reaches a subscriber
    exactly once.
    """

    def __init__(
        self,
        history: list[dict],
        subscribers: list[asyncio.Queue],
        loop: asyncio.AbstractEventLoop | None = None,
        lock: threading.Lock | None = None,
    ) -> None:
        self._history = history
        self._subscribers = subscribers
        self._loop = loop
        self._lock = lock if lock is not None else threading.Lock()

    def emit(self, event: str, data: dict) -> None:
        item = {
            "event": event,
            "data": data,
            "ts": datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            self._history.append(item)
            for q in list(self._subscribers):
                if self._loop is None:
                    q.put_nowait(item)
                else:
                    self._loop.call_soon_threadsafe(q.put_nowait, item)


def execute_run(
    run_id: str,
    request: RunRequest,
    run_dir: str | Path,
    hook: EventCaptureHook,
    cancel_event: threading.Event | None = None,
) -> dict[str, Any]:
    """Calibrate, evaluate and persist one run.  Blocking.

    Raises :class:`RunCancelled` between frames once ``cancel_event`` is set.
    """
    config = request.model_dump(mode="json")
    precision = parse_precision(request.precision)
    mode = InferenceMode(request.mode)
    hook.emit("run:started", {"run_id": run_id, "config": config})

    model_spec = request.model
    if model_spec.in_channels is None:
        model_spec = model_spec.model_copy(update={"in_channels": request.clip.channels})
    model = build_from_spec(model_spec)
    calibration = generate_clips(request.clip, request.calibration_clips)
    evaluation = generate_clip(
        request.clip.model_copy(
            update={"seed": request.clip.seed + request.calibration_clips}
        )
    )
    calib_config = CalibrationConfig(
        samples=request.samples,
        grid_points=request.grid_points,
        keyframe_period=max(2, request.period),
        precision=precision,
        weight_granularity=request.weight_granularity,
    )
    model = calibrate_model(model, [c.frames for c in calibration], calib_config)
    hook.emit("run:calibrated", {"run_id": run_id, "layers": len(model.layers)})
    if cancel_event is not None and cancel_event.is_set():
        raise RunCancelled(f"Run {run_id} cancelled")

    schedule = ScheduleConfig(request.period)

    def on_frame(t: int, out: Tensor, error: float) -> None:
        hook.emit(
            "run:frame",
            {
                "run_id": run_id,
                "frame_index": t,
                "is_keyframe": mode is InferenceMode.FRAME or schedule.is_keyframe(t),
                "output_mse_vs_fp32": error,
            },
        )
        if cancel_event is not None and cancel_event.is_set():
            raise RunCancelled(f"Run {run_id} cancelled after frame {t}")

    result = run_sequence(
        model,
        evaluation.frames,
        schedule,
        mode,
        PolicyConfig(request.tau),
        on_frame=on_frame,
    )
    manifest = write_run(run_dir, config, model, result, dump_policy=request.dump_policy)
    return manifest["summary"]


class RunExecutor:
    """Tracks background runs by id.

    Event streaming model
    ---------------------
    * ``event_history[run_id]`` is an append-only list of every event a run
      emitted.  It outlives the run so late SSE clients can replay it.
    * ``event_subscribers[run_id]`` holds one asyncio.Queue per connected
      SSE client; new events are delivered to every queue.
    """

    def __init__(self) -> None:
        self.active_runs: dict[str, dict[str, Any]] = {}
        self.cancel_events: dict[str, threading.Event] = {}
        self.event_history: dict[str, list[dict]] = {}
        self.event_subscribers: dict[str, list[asyncio.Queue]] = {}
        self.event_lock = threading.Lock()

    async def start(self, *, run_id: str, request: RunRequest, run_dir: str) -> None:
        """Start a run in the default thread pool."""
        loop = asyncio.get_running_loop()
        self.cancel_events[run_id] = threading.Event()
        self.event_history[run_id] = []
        self.event_subscribers[run_id] = []
        hook = EventCaptureHook(
            history=self.event_history[run_id],
            subscribers=self.event_subscribers[run_id],
            loop=loop,
            lock=self.event_lock,
        )
        self.active_runs[run_id] = {"status": "running", "run_dir": run_dir}
        self.active_runs[run_id]["task"] = asyncio.ensure_future(
            loop.run_in_executor(None, self._run_sync, run_id, request, run_dir, hook)
        )

    def _set_status(self, run_id: str, status: str, **extra: Any) -> None:
        info = self.active_runs.get(run_id)
        if info is not None:
            info["status"] = status
            info.update(extra)

    def _run_sync(
        self, run_id: str, request: RunRequest, run_dir: str, hook: EventCaptureHook
    ) -> None:
        cancel_event = self.cancel_events.get(run_id)
        try:
            summary = execute_run(run_id, request, run_dir, hook, cancel_event)
            hook.emit("run:complete", {"run_id": run_id, "status": "completed", **summary})
            self._set_status(run_id, "completed")
            logger.info("Run %s finished: completed", run_id)
        except RunCancelled as exc:
            update_manifest(run_dir, status="cancelled", end_time=_now())
            hook.emit(
                "run:cancelled",
                {"run_id": run_id, "status": "cancelled", "reason": str(exc)},
            )
            self._set_status(run_id, "cancelled")
            logger.info("Run %s finished: cancelled", run_id)
        except Exception as exc:
            logger.exception("Run %s failed", run_id)
            update_manifest(run_dir, status="failed", error=str(exc), end_time=_now())
            hook.emit("run:failed", {"run_id": run_id, "status": "failed", "error": str(exc)})
            self._set_status(run_id, "failed", error=str(exc))
        finally:
            # history stays for replay; live resources go
            self.cancel_events.pop(run_id, None)

    def get_status(self, run_id: str) -> str | None:
        info = self.active_runs.get(run_id)
        if info is None:
            return None
        return info["status"]

    def cancel(self, run_id: str) -> bool:
        """Request cancellation; False if unknown or not running."""
        info = self.active_runs.get(run_id)
        if info is None or info["status"] != "running":
            return False
        info["status"] = "cancelling"
        cancel_event = self.cancel_events.get(run_id)
        if cancel_event:
            cancel_event.set()
        return True

    def subscribe(self, run_id: str) -> tuple[list[dict], asyncio.Queue]:
        """Return a history snapshot and a queue for every later event.

        Callers must :meth:`unsubscribe` when done.
        """
        queue: asyncio.Queue = asyncio.Queue()
        with self.event_lock:
            snapshot = list(self.event_history.get(run_id, []))
            subscribers = self.event_subscribers.get(run_id)
            if subscribers is not None:
                subscribers.append(queue)
        return snapshot, queue

    def unsubscribe(self, run_id: str, queue: asyncio.Queue) -> None:
        with self.event_lock:
            subscribers = self.event_subscribers.get(run_id)
            if subscribers is not None:
                try:
                    subscribers.remove(queue)
                except ValueError:
                    pass

    def cleanup_completed(self) -> int:
        """Forget finished runs; returns how many were removed."""
        to_remove = [
            rid
            for rid, info in self.active_runs.items()
            if info["status"] in FINISHED_STATUSES
        ]
        for rid in to_remove:
            self.cancel_events.pop(rid, None)
            self.event_history.pop(rid, None)
            self.event_subscribers.pop(rid, None)
            del self.active_runs[rid]
        return len(to_remove)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()
