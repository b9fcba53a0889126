"""Command line entry point: ``resq <command> [options]``.

Commands::

    gen-clips    synthetic clips as Raw Tensor Files
    build-model  random toy conv stack (JSON + RTF weights)
    calibrate    fit every quantizer of a model
    run          run one calibrated model over clips
    sweep        quality vs cost sweep from an experiment file
    policy-map   dynamic bit-width maps and their trend with keyframe distance
    variance     frame vs residual statistics per layer
    granularity  per-tensor vs per-channel weight scales
    temporal     pairwise vs recurrent residual error per keyframe distance
    young-bound  how tight the convolution-free error estimate is

Every command takes ``--seed`` and ``--out`` (optional for ``run``, which can
write its artifacts separately through ``--report``, ``--dump-outputs`` and
``--dump-policy``).  Clip and model files given on the command line take
precedence over synthetic ones built from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from resq_video_sim.calibration import CalibrationConfig, calibrate_model
from resq_video_sim.dynamic_policy import DEFAULT_TAU, PolicyConfig
from resq_video_sim.engine import InferenceMode, ScheduleConfig, run_sequence
from resq_video_sim.errors import ResqError
from resq_video_sim.experiments import (
    ExperimentSpec,
    experiment_granularity,
    experiment_dynamic_efficiency,
    experiment_policy_map,
    experiment_temporal,
    experiment_tradeoff,
    experiment_variance,
    experiment_young_bound,
    write_rows,
    write_tradeoff,
)
from resq_video_sim.model import (
    ModelSpec,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
)
from resq_video_sim.notation import format_precision, parse_precision
from resq_video_sim.quantizer import Granularity
from resq_video_sim.run_store import summarize_result, write_policy_maps, write_run
from resq_video_sim.synthetic import (
    Pattern,
    SyntheticClipSpec,
    build_toy_model,
    generate_clips,
    load_clip,
    load_clip_dir,
    save_clip,
)
from resq_video_sim.tensor_core import Tensor, write_rtf

logger = logging.getLogger("resq_video_sim")

EXIT_ERROR = 2
OUTPUTS_FILE = "outputs.rtf"


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Experiment file from ``--config`` (or defaults); ``--seed`` overrides seeds."""
    spec = ExperimentSpec()
    if getattr(args, "config", None):
        spec = ExperimentSpec.model_validate_json(Path(args.config).read_text())
    if args.seed is not None:
        spec = spec.model_copy(
            update={
                "model": spec.model.model_copy(update={"seed": args.seed}),
                "clip": spec.clip.model_copy(update={"seed": args.seed}),
            }
        )
    return spec


def _clips_from(
    path: str | None, spec: ExperimentSpec, evaluation: bool
) -> list[list[Tensor]]:
    if path:
        p = Path(path)
        return load_clip_dir(p) if p.is_dir() else [load_clip(p)]
    clips = spec.evaluation_set() if evaluation else spec.calibration_set()
    return [c.frames for c in clips]


def _model_from(path: str | None, spec: ExperimentSpec) -> ModelSpec:
    return load_model(path) if path else spec.build_model()


def _seed(args: argparse.Namespace) -> int:
    return 0 if args.seed is None else args.seed


def _precision_text(args: argparse.Namespace) -> str:
    """``--precision`` if given, else ``--keyframe-bits|--residual-bits``.

    ``--pool 0,4,8`` turns the residual part into a pool that keeps the
    residual weight bits, e.g. ``W8A{0,4,8}``.
    """
    if args.precision:
        return args.precision
    residual = args.residual_bits
    if args.pool:
        weight = residual.split("A", 1)[0]
        residual = f"{weight}A{{{args.pool}}}"
    return f"{args.keyframe_bits}|{residual}"


def _per_clip(path: Path, index: int, count: int) -> Path:
    """Output path for clip ``index``; a single clip writes to ``path`` itself."""
    if count == 1:
        return path
    if path.suffix:
        return path.with_name(f"{path.stem}_clip_{index:02d}{path.suffix}")
    return path / f"clip_{index:02d}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_clips(args: argparse.Namespace) -> int:
    spec = SyntheticClipSpec(
        height=args.height,
        width=args.width,
        channels=args.channels,
        length=args.length,
        pattern=args.pattern,
        magnitude=args.magnitude,
        noise=args.noise,
        seed=_seed(args),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(generate_clips(spec, args.count)):
        save_clip(out / f"clip_{i:02d}.rtf", clip)
        write_rtf(out / f"clip_{i:02d}_mask.rtf", np.stack(clip.masks).astype(np.float32))
    (out / "clips.json").write_text(
        json.dumps({"spec": spec.model_dump(mode="json"), "count": args.count}, indent=2)
    )
    logger.info("Wrote %d clips to %s", args.count, out)
    return 0


def cmd_build_model(args: argparse.Namespace) -> int:
    model = build_toy_model(
        depth=args.depth,
        channels=args.channels,
        kernel=args.kernel,
        seed=_seed(args),
        in_channels=args.in_channels,
        identity=args.identity,
        bias=args.bias,
    )
    save_model(model, args.out)
    logger.info("Wrote %d-layer model to %s", len(model.layers), args.out)
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    model = _model_from(args.model, spec)
    clips = _clips_from(args.clips, spec, evaluation=False)
    config = CalibrationConfig(
        samples=args.samples,
        grid_points=args.grid,
        keyframe_period=args.period,
        precision=parse_precision(_precision_text(args)),
        weight_granularity=args.granularity,
    )
    calibrated = calibrate_model(model, clips, config)
    save_calibration(calibrated, args.out)
    logger.info("Wrote %s calibration to %s", format_precision(config.precision), args.out)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    precision = _precision_text(args)
    schedule = ScheduleConfig(args.period)
    policy = PolicyConfig(args.tau)
    model = _model_from(args.model, spec)
    if args.calib:
        model = load_calibration(model, args.calib)
    else:
        config = CalibrationConfig(
            samples=spec.samples,
            grid_points=spec.grid_points,
            keyframe_period=max(2, args.period),
            precision=parse_precision(precision),
            weight_granularity=spec.weight_granularity,
        )
        model = calibrate_model(model, _clips_from(None, spec, evaluation=False), config)

    clips = _clips_from(args.clips, spec, evaluation=True)
    for i, clip in enumerate(clips):
        result = run_sequence(model, clip, schedule, args.mode, policy)
        label = f"clip {i}"
        if args.out:
            run_dir = _per_clip(Path(args.out), i, len(clips))
            config = {
                "mode": InferenceMode(args.mode).value,
                "period": args.period,
                "tau": args.tau,
                "precision": None if args.calib else precision,
                "model": args.model,
                "calibration": args.calib,
                "clip_index": i,
            }
            write_run(run_dir, config, model, result, giga=args.giga)
            label = str(run_dir)
        if args.report:
            report = _per_clip(Path(args.report), i, len(clips))
            report.parent.mkdir(parents=True, exist_ok=True)
            result.report.write_csv(report, result.frame_mse, giga=args.giga)
        if args.dump_outputs:
            out_dir = _per_clip(Path(args.dump_outputs), i, len(clips))
            out_dir.mkdir(parents=True, exist_ok=True)
            write_rtf(out_dir / OUTPUTS_FILE, np.stack(result.outputs))
        if args.dump_policy:
            maps = write_policy_maps(
                _per_clip(Path(args.dump_policy), i, len(clips)), model, result
            )
            logger.info("Wrote %d policy maps for %s", len(maps), label)
        summary = summarize_result(result)
        print(
            f"{label}: {summary['amortized_gbops']:.6f} GBOPs/frame "
            f"(peak {summary['peak_gbops']:.6f}), mse {summary['mean_mse']:.3e}"
        )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    rows = experiment_tradeoff(spec, threads=args.threads)
    write_tradeoff(args.out, rows, max(spec.periods))
    return 0


def cmd_policy_map(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    precision = parse_precision(args.precision)
    if not precision.uses_pool:
        raise ResqError(f"policy-map needs a residual pool, got {args.precision}")
    config = CalibrationConfig(
        samples=spec.samples,
        grid_points=spec.grid_points,
        keyframe_period=args.period,
        precision=precision,
        weight_granularity=spec.weight_granularity,
    )
    calib = [c.frames for c in spec.calibration_set()]
    model = calibrate_model(spec.build_model(), calib, config)
    out = Path(args.out)
    summary = experiment_policy_map(
        model, spec.evaluation_set(), args.period, args.tau, out_dir=out / "maps"
    )
    write_rows(out / "policy_summary.csv", summary.rows)
    efficiency = experiment_dynamic_efficiency(
        model, spec.evaluation_set(), args.period, args.tau
    )
    write_rows(out / "dynamic_efficiency.csv", efficiency)
    (out / "policy_stats.json").write_text(
        json.dumps(
            {
                "spearman_rho": summary.spearman_rho,
                "moving_mean_bits": summary.moving_mean_bits,
                "static_mean_bits": summary.static_mean_bits,
                "maps": len(summary.map_paths),
            },
            indent=2,
        )
    )
    return 0


def cmd_variance(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    model = _model_from(args.model, spec)
    clips = _clips_from(args.clips, spec, evaluation=True)
    rows = experiment_variance(model, clips, args.period, args.bits)
    write_rows(args.out, rows)
    return 0


def cmd_granularity(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    rows = experiment_granularity(
        spec.build_model(),
        spec.calibration_set(),
        spec.evaluation_set(),
        precisions=spec.precisions,
        keyframe_period=args.period,
        samples=spec.samples,
        grid_points=spec.grid_points,
    )
    write_rows(args.out, rows)
    return 0


def cmd_temporal(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    config = CalibrationConfig(
        samples=spec.samples,
        grid_points=spec.grid_points,
        keyframe_period=args.period,
        precision=parse_precision(args.precision),
        weight_granularity=spec.weight_granularity,
    )
    calib = [c.frames for c in spec.calibration_set()]
    model = calibrate_model(spec.build_model(), calib, config)
    rows = experiment_temporal(model, spec.evaluation_set(), args.period)
    write_rows(args.out, rows)
    return 0


def cmd_young_bound(args: argparse.Namespace) -> int:
    start = _seed(args)
    rows = experiment_young_bound(seeds=range(start, start + args.seeds))
    write_rows(args.out, rows)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _precision_parent(residual_default: str) -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--keyframe-bits", default="W8A8", help="Keyframe precision, e.g. W8A8")
    parent.add_argument(
        "--residual-bits", default=residual_default, help="Residual precision, e.g. W4A4"
    )
    parent.add_argument(
        "--pool",
        default=None,
        help="Residual activation bit pool, e.g. 0,4,8 (dynamic policy)",
    )
    parent.add_argument(
        "--precision",
        default=None,
        help="Full notation, e.g. 'W8A8|W8A{0,4,8}'; overrides the three flags above",
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resq", description="ResQ video inference simulator"
    )
    parser.add_argument(
        "--log-level",
        default=None,
        help="Logging level (default: RESQ_LOG_LEVEL or INFO)",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Sweep worker threads (default: RESQ_THREADS or the CPU count)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=None, help="Base RNG seed")

    common = argparse.ArgumentParser(add_help=False, parents=[seeded])
    common.add_argument("--out", required=True, help="Output file or directory")

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument("--config", default=None, help="Experiment JSON file")

    p = sub.add_parser("gen-clips", parents=[common], help="Generate synthetic clips")
    p.add_argument(
        "--pattern", type=Pattern, choices=list(Pattern), default=Pattern.TRANSLATING_SQUARE
    )
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--length", type=int, default=8)
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_gen_clips)

    p = sub.add_parser("build-model", parents=[common], help="Build a toy model")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--identity", action="store_true")
    p.add_argument("--bias", action="store_true")
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser(
        "calibrate",
        parents=[common, experiment, _precision_parent("W4A4")],
        help="Calibrate quantizers",
    )
    p.add_argument("--model", default=None, help="Model JSON (default: from --config)")
    p.add_argument("--clips", "--clip", default=None, help="Clip file or directory")
    p.add_argument("--period", type=int, default=3)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument(
        "--granularity",
        type=Granularity,
        choices=list(Granularity),
        default=Granularity.PER_TENSOR,
    )
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser(
        "run",
        parents=[seeded, experiment, _precision_parent("W8A4")],
        help="Run a calibrated model",
    )
    p.add_argument("--out", default=None, help="Run directory: manifest, report and maps")
    p.add_argument("--model", default=None)
    p.add_argument("--calib", default=None, help="Calibration JSON (precision flags unused)")
    p.add_argument("--clips", "--clip", default=None, help="Clip file or directory")
    p.add_argument(
        "--mode",
        type=InferenceMode,
        choices=list(InferenceMode),
        default=InferenceMode.RESQ_PAIRWISE,
    )
    p.add_argument("--period", type=int, default=4)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--report", default=None, metavar="FILE", help="Per-frame BOP/MSE CSV")
    p.add_argument(
        "--dump-policy", default=None, metavar="DIR", help="Write PGM policy maps to DIR"
    )
    p.add_argument(
        "--dump-outputs", default=None, metavar="DIR", help=f"Write {OUTPUTS_FILE} to DIR"
    )
    p.add_argument("--giga", action="store_true", help="Report GBOPs instead of BOPs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common, experiment], help="Quality vs cost sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("policy-map", parents=[common, experiment], help="Dynamic policy maps")
    p.add_argument("--precision", default="W8A8|W8A{0,4,8}")
    p.add_argument("--period", type=int, default=4)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.set_defaults(func=cmd_policy_map)

    p = sub.add_parser(
        "variance", parents=[common, experiment], help="Frame vs residual statistics"
    )
    p.add_argument("--model", default=None)
    p.add_argument("--clips", default=None)
    p.add_argument("--period", type=int, default=2)
    p.add_argument("--bits", type=int, default=4)
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser(
        "granularity", parents=[common, experiment], help="Weight scale granularity"
    )
    p.add_argument("--period", type=int, default=4)
    p.set_defaults(func=cmd_granularity)

    p = sub.add_parser("temporal", parents=[common, experiment], help="Pairwise vs recurrent")
    p.add_argument("--precision", default="W8A8|W8A4")
    p.add_argument("--period", type=int, default=8)
    p.set_defaults(func=cmd_temporal)

    p = sub.add_parser("young-bound", parents=[common], help="Error estimate tightness")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_young_bound)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # CLI flags take precedence; environment variables are fallbacks
    level = args.log_level or os.environ.get("RESQ_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ResqError, ValidationError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
