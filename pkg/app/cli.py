"""Command-line entry point: ``python -m app <subcommand>``.

Exit codes: 0 success, 1 pipeline/input error (message on stderr names the file),
2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from monitoring.performance_monitor import PerformanceMonitor

from .config import load_config
from .errors import FrameError, PickSightError
from .frame_ingest import DEPTH_FILE, read_frame
from .pipeline import process_frame, run_frame

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="picksight", description="Fruit perception pipeline")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("process", help="Run the pipeline on one frame directory")
    p.add_argument("--frame", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("synth", help="Render a synthetic frame from a scene document")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="Score predicted masks against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--classes", required=True, type=int)
    p.add_argument("--out", type=Path, help="Directory for eval_report.txt / .json")

    p = sub.add_parser("bench", help="Per-stage timing over a set of frame directories")
    p.add_argument("--frames", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--metrics", type=Path, help="Write per-run stage latencies as JSON")

    p = sub.add_parser("study", help="Distance-banded accuracy study on synthetic frames")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path)
    return parser


def _cmd_process(args) -> int:
    cfg = load_config(args.config)
    written = process_frame(args.frame, cfg, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    from utilities.synth_scene import SceneSpec, render_frame

    if not args.spec.exists():
        raise FrameError("scene document not found", args.spec)
    try:
        spec = SceneSpec.from_file(args.spec)
    except (KeyError, TypeError, ValueError, yaml.YAMLError) as e:
        raise FrameError(f"invalid scene document: {e}", args.spec) from e
    render_frame(spec, args.out, seed=args.seed)
    print(f"rendered {len(spec.fruits)} fruits to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from utilities.eval_harness import EvaluationHarness

    harness = EvaluationHarness(args.pred, args.truth, args.classes)
    summary = harness.run_evaluation()
    print(harness.format_report(summary), end="")
    if args.out:
        harness.save_results(summary, args.out)
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if not args.frames.is_dir():
        raise FrameError("frame set directory not found", args.frames)
    frame_dirs = sorted(d for d in args.frames.iterdir() if (d / DEPTH_FILE).exists())
    if not frame_dirs:
        raise FrameError("no frame directories (with depth.png) found", args.frames)
    monitor = PerformanceMonitor()
    for d in frame_dirs:
        run_frame(read_frame(d), cfg, monitor)
    print(monitor.format_table(f"Stage timing over {len(frame_dirs)} frames"), end="")
    if args.metrics:
        args.metrics.write_text(monitor.export_metrics(), encoding="utf-8")
    return 0


def _cmd_study(args) -> int:
    from utilities.eval_harness import format_study, run_distance_study

    cfg = load_config(args.config)
    stats = run_distance_study(trials=args.trials, seed=args.seed, cfg=cfg)
    report = format_study(stats)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "study.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return 0


_COMMANDS = {
    "process": _cmd_process,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "study": _cmd_study,
}


def cli_entry(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except PickSightError as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:  # pragma: no cover
    raise SystemExit(cli_entry())
