"""Evaluation suites: baseline vs CCV comparison and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..cycle import CcvConfig, finetune_backbone_cycle, run_ccv
from ..metrics import hard_dice
from ..net.checkpoint import load_checkpoint
from ..net.model import ModelWeights, forward
from ..synthetic import apply_query_shift, make_rng
from .config import ExperimentConfig
from .dataset import TaskData, load_dataset, missing_dataset_files
from .selection import knn_indices, random_indices

log = logging.getLogger(__name__)

METRICS_HEADER = ["query_id", "task_id", "dice_base", "dice_ccv", "iters", "ms"]
SUMMARY_HEADER = ["task_id", "n", "dice_base", "dice_ccv", "delta", "ci_low", "ci_high"]
BOOTSTRAP_REPS = 10000


def derive_seed(*entropy: int) -> int:
    return int(make_rng(*entropy).integers(2 ** 62))


def query_id(task_id: int, index: int) -> str:
    return f"t{task_id:04d}_q{index:04d}"


@dataclass(frozen=True)
class MetricsRow:
    query_id: str
    task_id: int
    dice_base: float
    dice_ccv: float
    iters: int
    ms: float

    def __post_init__(self):
        for name in ("dice_base", "dice_ccv"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def delta(self) -> float:
        return self.dice_ccv - self.dice_base


@dataclass(frozen=True)
class SummaryRow:
    task_id: str
    n: int
    dice_base: float
    dice_ccv: float
    delta: float
    ci_low: float
    ci_high: float


def paired_bootstrap_ci(deltas: Sequence[float], seed: int = 0, reps: int = BOOTSTRAP_REPS,
                        level: float = 0.95) -> tuple[float, float]:
    """Percentile interval for the mean of paired differences."""
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise ValueError("bootstrap needs at least one difference")
    idx = make_rng(seed, d.size).integers(d.size, size=(reps, d.size))
    means = d[idx].mean(axis=1)
    alpha = (1 - level) / 2
    return float(np.quantile(means, alpha)), float(np.quantile(means, 1 - alpha))


def summarize(rows: Sequence[MetricsRow], seed: int = 0) -> list[SummaryRow]:
    out = []
    groups = {}
    for r in rows:
        groups.setdefault(r.task_id, []).append(r)
    for key, members in sorted(groups.items()) + [("all", list(rows))]:
        base = [r.dice_base for r in members]
        ccv = [r.dice_ccv for r in members]
        deltas = [r.delta for r in members]
        lo, hi = paired_bootstrap_ci(deltas, seed)
        out.append(SummaryRow(str(key), len(members), float(np.mean(base)), float(np.mean(ccv)),
                              float(np.mean(deltas)), lo, hi))
    return out


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_metrics_csv(rows: Sequence[MetricsRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in sorted(rows, key=lambda r: r.query_id):
            w.writerow([_fmt(getattr(r, f)) for f in METRICS_HEADER])


def read_metrics_csv(path: Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow(r["query_id"], int(r["task_id"]), float(r["dice_base"]), float(r["dice_ccv"]),
                           int(r["iters"]), float(r["ms"])) for r in csv.DictReader(fh)]


def write_summary_csv(summary: Sequence[SummaryRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summary:
            w.writerow([_fmt(getattr(s, f)) for f in SUMMARY_HEADER])


def check_inputs(cfg: ExperimentConfig) -> None:
    missing = [] if Path(cfg.checkpoint).is_file() else [str(cfg.checkpoint)]
    missing += missing_dataset_files(cfg.dataset)
    if missing:
        raise FileNotFoundError("missing input files: " + ", ".join(missing))


@dataclass(frozen=True)
class WorkUnit:
    task: TaskData
    index: int

    @property
    def query_id(self) -> str:
        return query_id(self.task.task_id, self.index)


def work_units(tasks: Sequence[TaskData], cfg: ExperimentConfig, max_queries: Optional[int] = None) -> list:
    cap = cfg.max_queries_per_task if max_queries is None else max_queries
    units = []
    for task in tasks:
        ids = task.splits.test_ids[:cap] if cap else task.splits.test_ids
        units.extend(WorkUnit(task, i) for i in ids)
    for task in tasks:
        if cfg.context_size > len(task.splits.context_ids):
            raise ValueError(f"context_size {cfg.context_size} exceeds the context pool of task "
                             f"{task.task_id} ({len(task.splits.context_ids)} pairs)")
    return units


def shifted_query(unit: WorkUnit, cfg: ExperimentConfig) -> np.ndarray:
    return apply_query_shift(unit.task.images[unit.index], cfg.shift_kind, cfg.shift_magnitude)


def choose_context(weights: ModelWeights, unit: WorkUnit, query: np.ndarray, cfg: ExperimentConfig) -> list:
    pool = unit.task.pool
    if cfg.context_selection == "knn":
        ids = knn_indices(weights, query, pool, cfg.context_size)
    else:
        ids = random_indices(len(pool), cfg.context_size, derive_seed(cfg.seed, unit.task.task_id, unit.index))
    return [pool[i] for i in ids]


def fixed_context(unit: WorkUnit, cfg: ExperimentConfig) -> list:
    """One context per task, shared by all its queries (the limited-context ablation setting)."""
    pool = unit.task.pool
    ids = random_indices(len(pool), cfg.context_size, derive_seed(cfg.seed, unit.task.task_id))
    return [pool[i] for i in ids]


def run_units(fn: Callable, units: Sequence, single_thread: bool = False, workers: Optional[int] = None) -> list:
    if single_thread or len(units) < 2:
        return [fn(u) for u in units]
    n = workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, units))


def _evaluate_unit(weights: ModelWeights, cfg: ExperimentConfig, timing: bool, unit: WorkUnit) -> MetricsRow:
    query = shifted_query(unit, cfg)
    target = unit.task.masks[unit.index]
    context = choose_context(weights, unit, query, cfg)
    base = forward(weights, query, context).data
    start = time.perf_counter()
    outcome = run_ccv(weights, query, context, cfg.ccv)
    ms = (time.perf_counter() - start) * 1000 if timing else 0.0
    return MetricsRow(unit.query_id, unit.task.task_id, hard_dice(base, target),
                      hard_dice(outcome.final_prediction, target), outcome.iterations_run, round(ms, 3))


@dataclass
class SuiteResult:
    rows: list
    summary: list


def evaluate_suite(cfg: ExperimentConfig, single_thread: bool = False, timing: bool = True,
                   max_queries: Optional[int] = None, weights: Optional[ModelWeights] = None,
                   write: bool = True, workers: Optional[int] = None) -> SuiteResult:
    """Baseline and CCV hard Dice for every test query; writes metrics.csv and summary.csv."""
    cfg.validate()
    if weights is None:
        check_inputs(cfg)
        weights = load_checkpoint(cfg.checkpoint)
    elif missing_dataset_files(cfg.dataset):
        raise FileNotFoundError("missing input files: " + ", ".join(missing_dataset_files(cfg.dataset)))
    tasks = load_dataset(cfg.dataset)
    units = work_units(tasks, cfg, max_queries)
    log.info("evaluating %d queries over %d tasks", len(units), len(tasks))
    rows = run_units(lambda u: _evaluate_unit(weights, cfg, timing, u), units, single_thread, workers)
    rows.sort(key=lambda r: r.query_id)
    summary = summarize(rows, cfg.seed)
    if write:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out / "metrics.csv")
        write_summary_csv(summary, out / "summary.csv")
    return SuiteResult(rows, summary)


@dataclass(frozen=True)
class Variant:
    table: str
    name: str
    cycle: bool
    prompt: bool
    prompt_shape: str = "image"
    update_first: bool = True
    update_second: bool = True

    def ccv_config(self, base: CcvConfig) -> CcvConfig:
        return dataclasses.replace(base, objective="cycle" if self.cycle else "entropy",
                                   prompt_mode=self.prompt_shape, update_first=self.update_first,
                                   update_second=self.update_second)

    @property
    def method(self) -> tuple:
        """Variants with equal method keys produce identical predictions."""
        if not self.prompt:
            return ("finetune",) if self.cycle else ("baseline",)
        return ("prompt", self.cycle, self.prompt_shape, self.update_first, self.update_second)


VARIANTS = (
    Variant("components", "baseline", cycle=False, prompt=False),
    Variant("components", "cycle_finetune", cycle=True, prompt=False),
    Variant("components", "prompt_entropy", cycle=False, prompt=True),
    Variant("components", "cycle_prompt", cycle=True, prompt=True),
    Variant("prompt", "image_both", cycle=True, prompt=True),
    Variant("prompt", "image_first", cycle=True, prompt=True, update_second=False),
    Variant("prompt", "image_second", cycle=True, prompt=True, update_first=False),
    Variant("prompt", "border_both", cycle=True, prompt=True, prompt_shape="border"),
)

ABLATION_HEADER = ["table", "variant", "cycle", "prompt", "prompt_shape", "update_first", "update_second",
                   "n", "mean_dice", "delta_vs_baseline"]
ABLATION_QUERY_HEADER = ["variant", "query_id", "task_id", "dice", "iters"]
FINETUNE_LR = 1e-4


def _ablate_unit(weights: ModelWeights, cfg: ExperimentConfig, unit: WorkUnit) -> dict:
    query = shifted_query(unit, cfg)
    target = unit.task.masks[unit.index]
    context = fixed_context(unit, cfg)
    results = {}
    for v in VARIANTS:
        if v.method in results:
            continue
        if v.method == ("baseline",):
            pred, iters = forward(weights, query, context).data, 0
        elif v.method == ("finetune",):
            out = finetune_backbone_cycle(weights, query, context, lr=FINETUNE_LR, iters=cfg.ccv.max_iters)
            pred, iters = out.final_prediction, out.iterations_run
        else:
            out = run_ccv(weights, query, context, v.ccv_config(cfg.ccv))
            pred, iters = out.final_prediction, out.iterations_run
        dice = hard_dice(pred, target)
        if not np.isfinite(dice):
            raise FloatingPointError(f"non-finite Dice for {unit.query_id}")
        results[v.method] = (dice, iters)
    return {v.name: results[v.method] for v in VARIANTS}


def run_ablation(cfg: ExperimentConfig, single_thread: bool = False, max_queries: Optional[int] = None,
                 weights: Optional[ModelWeights] = None, write: bool = True) -> list[dict]:
    """The component and prompt-variant grids; writes ablation.csv and ablation_queries.csv."""
    cfg.validate()
    if weights is None:
        check_inputs(cfg)
        weights = load_checkpoint(cfg.checkpoint)
    tasks = load_dataset(cfg.dataset)
    units = work_units(tasks, cfg, max_queries)
    log.info("ablation over %d queries, %d variants", len(units), len(VARIANTS))
    per_unit = run_units(lambda u: _ablate_unit(weights, cfg, u), units, single_thread)
    order = sorted(range(len(units)), key=lambda i: units[i].query_id)
    base = [per_unit[i]["baseline"][0] for i in order]
    table = []
    for v in VARIANTS:
        dice = [per_unit[i][v.name][0] for i in order]
        table.append({"table": v.table, "variant": v.name, "cycle": v.cycle, "prompt": v.prompt,
                      "prompt_shape": v.prompt_shape if v.prompt else "none",
                      "update_first": v.update_first, "update_second": v.update_second,
                      "n": len(dice), "mean_dice": float(np.mean(dice)),
                      "delta_vs_baseline": float(np.mean(dice) - np.mean(base))})
    if write:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_HEADER)
            for row in table:
                w.writerow([_fmt(row[k]) for k in ABLATION_HEADER])
        with open(out / "ablation_queries.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_QUERY_HEADER)
            for v in VARIANTS:
                for i in order:
                    dice, iters = per_unit[i][v.name]
                    w.writerow([v.name, units[i].query_id, units[i].task.task_id, _fmt(dice), iters])
    return table
