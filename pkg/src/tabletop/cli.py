"""Command-line entry point: ``tabletop run|suite|ablate|report|heatmap``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .geometry import Pose
from .orchestrator import RunConfig, run_task
from .scenes import random_scene
from .world import load_scene

log = logging.getLogger("tabletop")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--backend", choices=("scripted", "table", "remote"), default="scripted")
    p.add_argument("--table", type=Path, help="recorded response table for --backend table")
    p.add_argument("--endpoint", help="chat-completion URL for --backend remote")
    p.add_argument("--model", default="gpt-4o")
    p.add_argument("--token-env", default="TABLETOP_API_KEY", help="environment variable holding the API token")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0, help="depth noise sigma in meters")
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--confusion-rate", type=float, default=0.0)
    p.add_argument("--no-affordance", action="store_true", help="grasp tools at their centroid")


def _config(args) -> RunConfig:
    opts: dict = {}
    if args.backend == "table":
        if args.table is None:
            raise SystemExit("--backend table needs --table")
        opts = {"table": str(args.table)}
    elif args.backend == "remote":
        if not args.endpoint:
            raise SystemExit("--backend remote needs --endpoint")
        opts = {"endpoint": args.endpoint, "model": args.model, "token_env": args.token_env,
                "timeout": args.timeout, "max_retries": args.max_retries}
    return RunConfig(backend=args.backend, backend_options=opts, depth_noise=args.noise, miss_rate=args.miss_rate,
                     confusion_rate=args.confusion_rate, no_affordance=args.no_affordance, seed=args.seed,
                     output_dir=str(args.out) if args.out else None)


def _specs(args) -> list:
    specs = harness.default_specs(trials=args.trials)
    if args.category:
        specs = [s for s in specs if s.category in args.category]
    if args.task:
        specs = [s for s in specs if s.name in args.task]
    if not specs:
        raise SystemExit("no experiment matches the filters")
    return specs


def cmd_run(args) -> int:
    if args.scene:
        world = load_scene(args.scene)
    else:
        world = random_scene(args.objects.split(","), seed=args.seed)
    trace = run_task(args.query, world, _config(args))
    for rec in trace.steps:
        status = rec.verification.status if rec.verification else "error"
        print(f"{rec.index:>2} {rec.route:<12} {status:<5} {rec.step.action} {rec.step.object or rec.step.tool}")
    print("completed" if trace.completed else f"stopped at {trace.stopped_at}: {trace.error}")
    if args.out:
        print(f"trace written to {args.out / 'trace.jsonl'}")
    return 0 if trace.completed else 1


def _write_figures(result, out: Path) -> None:
    from .plotting import gate_bars

    gate_bars(result.rows, out / "gates.png")


def cmd_suite(args) -> int:
    cfg = _config(args)
    out = args.out or Path("results")
    result = harness.run_suite(_specs(args), replace(cfg, output_dir=None), out)
    _write_figures(result, out)
    sys.stdout.write(result.markdown())
    log.info("wrote %s", out)
    return 0


def cmd_ablate(args) -> int:
    from .plotting import ablation_bars

    cfg = _config(args)
    out = args.out or Path("ablation")
    result = harness.ablation(_specs(args), replace(cfg, output_dir=None), out)
    ablation_bars(result.baseline.rows, result.ablated.rows, out / "ablation.png")
    sys.stdout.write(result.markdown())
    return 0


def cmd_report(args) -> int:
    result = harness.load_suite(args.directory)
    harness.write_suite(result, args.directory)
    _write_figures(result, args.directory)
    sys.stdout.write(result.markdown())
    return 0


def cmd_heatmap(args) -> int:
    from .grasping import load_tool_db, task_oriented_grasp
    from .plotting import grasp_figure

    world = random_scene([args.tool], seed=args.seed)
    yaw = float(np.random.default_rng(args.seed).uniform(-180, 180)) if args.random_yaw else 0.0
    if yaw:
        obj = world.get(args.tool)
        obj.pose = Pose(obj.pose.position, (0.0, 0.0, yaw))
    res = task_oriented_grasp(world, args.tool, args.task, load_tool_db(), no_affordance=args.no_affordance)
    path = grasp_figure(res.capture, list(res.candidates), res.candidate, res.region_mask, args.out,
                        title=f"{args.tool}: {res.path} grasp")
    print(f"{res.path} grasp at pixel ({res.candidate.u}, {res.candidate.v}), angle {res.candidate.angle:g}; "
          f"figure written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabletop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one task")
    p.add_argument("query")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", type=Path, help="scene YAML or JSON")
    src.add_argument("--objects", help="comma-separated catalogue types for a random layout")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    for name, func, text in (("suite", cmd_suite, "run the experiment battery"),
                             ("ablate", cmd_ablate, "compare affordance and centroid grasping")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--trials", type=int, default=10)
        p.add_argument("--category", action="append", choices=harness.CATEGORIES)
        p.add_argument("--task", action="append", help="task name, repeatable")
        _add_run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="re-render tables and figures from a stored suite")
    p.add_argument("directory", type=Path)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("heatmap", help="draw grasp candidates for one tool")
    p.add_argument("tool")
    p.add_argument("--task", default="use")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-yaw", action="store_true")
    p.add_argument("--no-affordance", action="store_true")
    p.add_argument("--out", type=Path, default=Path("grasp.png"))
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
