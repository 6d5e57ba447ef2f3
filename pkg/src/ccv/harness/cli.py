"""Command-line entry point: ``ccv <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import __version__
from ..cycle import apply_prompt, run_ccv, write_trace_csv
from ..metrics import hard_dice
from ..net.checkpoint import load_checkpoint, save_checkpoint
from ..net.model import forward
from ..trainer import TrainConfig, train_backbone
from .checks import run_checks
from .config import ExperimentConfig
from .dataset import export_dataset, load_task, task_dir_name
from .evaluate import WorkUnit, check_inputs, choose_context, evaluate_suite, run_ablation, shifted_query
from .pgm import write_pgm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config file (key = value format)")
    p.add_argument("--checkpoint", type=Path, help="override the checkpoint path")
    p.add_argument("--data", type=Path, help="override the dataset directory")
    p.add_argument("--out", type=Path, help="override the output directory")
    p.add_argument("--max-iters", type=int, help="override the CCV iteration cap")
    p.add_argument("--max-queries", type=int, help="test queries per task (0 = all)")
    p.add_argument("--single-thread", action="store_true", help="run queries sequentially")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccv", description="Cycle context verification for in-context segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic task suite to PGM files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--pool", type=int, default=50, help="pairs per task")
    p.add_argument("--side", type=int, default=64)

    p = sub.add_parser("train", help="episodic training of the backbone")
    d = TrainConfig()
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="CSV training log")
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch", type=int, default=d.batch_episodes)
    p.add_argument("--context-size", type=int, default=d.context_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--side", type=int, default=d.side)

    p = sub.add_parser("eval", help="baseline vs CCV on every test query")
    _experiment_args(p)
    p.add_argument("--no-timing", action="store_true", help="write 0 in the ms column")

    p = sub.add_parser("ablate", help="component and prompt-variant ablation grids")
    _experiment_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graphs", type=int, default=5, help="number of random composed graphs")

    p = sub.add_parser("trace", help="per-iteration trace and images for one query")
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--index", type=int, required=True, help="image index within the task")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.checkpoint:
        cfg.checkpoint = str(args.checkpoint)
    if args.data:
        cfg.dataset = str(args.data)
    if getattr(args, "out", None):
        cfg.output = str(args.out)
    if getattr(args, "max_iters", None) is not None:
        cfg.ccv.max_iters = args.max_iters
    if getattr(args, "max_queries", None) is not None:
        cfg.max_queries_per_task = args.max_queries
    return cfg.validate()


def _cmd_gen_data(args) -> int:
    dirs = export_dataset(args.out, args.seed, args.tasks, args.pool, args.side)
    print(f"wrote {len(dirs)} tasks to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = TrainConfig(steps=args.steps, batch_episodes=args.batch, context_size=args.context_size,
                      lr=args.lr, seed=args.seed, side=args.side)
    start = time.perf_counter()
    weights = train_backbone(cfg, log_path=args.log)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(weights, args.out)
    print(f"trained {cfg.steps} steps in {time.perf_counter() - start:.1f} s, saved {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _experiment(args)
    result = evaluate_suite(cfg, single_thread=args.single_thread, timing=not args.no_timing)
    for s in result.summary:
        print(f"task {s.task_id}: n={s.n} base={s.dice_base:.4f} ccv={s.dice_ccv:.4f} "
              f"delta={s.delta:+.4f} ci=[{s.ci_low:+.4f}, {s.ci_high:+.4f}]")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _experiment(args)
    for row in run_ablation(cfg, single_thread=args.single_thread):
        print(f"{row['table']:<10} {row['variant']:<15} dice={row['mean_dice']:.4f} "
              f"delta={row['delta_vs_baseline']:+.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    ok = True
    for name, err, passed in run_checks(args.seed, args.graphs):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} rel_err={err:.3e}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_trace(args) -> int:
    cfg = _experiment(args)
    check_inputs(cfg)
    weights = load_checkpoint(cfg.checkpoint)
    task = load_task(Path(cfg.dataset) / task_dir_name(args.task))
    if not 0 <= args.index < len(task.images):
        raise ValueError(f"index {args.index} out of range for task {args.task} ({len(task.images)} images)")
    unit = WorkUnit(task, args.index)
    query = shifted_query(unit, cfg)
    context = choose_context(weights, unit, query, cfg)
    target = task.masks[args.index]
    base = forward(weights, query, context).data
    outcome = run_ccv(weights, query, context, cfg.ccv)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(outcome.trace, out / "trace.csv")
    prompt = outcome.prompt.values.data
    span = float(np.abs(prompt).max())
    q_hat = apply_prompt(query, outcome.prompt).data
    images = {
        "query.pgm": task.images[args.index],
        "query_shifted.pgm": query,
        "query_prompted.pgm": np.clip(q_hat, 0, 1),
        # zero maps to mid-grey
        "prompt.pgm": 0.5 + 0.5 * prompt / span if span > 0 else np.full_like(prompt, 0.5),
        "mask.pgm": target,
        "pred_base.pgm": base,
        "pred_ccv.pgm": outcome.final_prediction,
    }
    for name, img in images.items():
        write_pgm(np.clip(img, 0, 1), out / name)
    print(f"iters={outcome.iterations_run} dice_base={hard_dice(base, target):.4f} "
          f"dice_ccv={hard_dice(outcome.final_prediction, target):.4f} -> {out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "trace": _cmd_trace,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"ccv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
