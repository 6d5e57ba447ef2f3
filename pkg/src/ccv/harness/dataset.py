"""On-disk synthetic task suites.

Layout::

    root/
      task_0000/
        img_0000.pgm  msk_0000.pgm  ...
        splits.txt    test = 1 4 ... / val = ... / context = ...
        task.txt      the TaskSpec fields as ``key = value``
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from ..net.model import ContextPair
from ..synthetic import SplitSpec, make_rng, make_splits, render_pair, sample_task
from .config import parse_config
from .pgm import read_pgm, write_pgm

_SPLIT_SEED_TAG = 4


def task_dir_name(task_id: int) -> str:
    return f"task_{task_id:04d}"


def split_seed(master_seed: int, task_id: int) -> int:
    return int(make_rng(master_seed, task_id, _SPLIT_SEED_TAG).integers(2 ** 62))


def export_task(root: Union[str, Path], master_seed: int, task_id: int, pool_size: int,
                side: int = 64) -> Path:
    spec = sample_task(master_seed, task_id)
    out = Path(root) / task_dir_name(task_id)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(pool_size):
        pair = render_pair(spec, i, side)
        write_pgm(pair.image, out / f"img_{i:04d}.pgm")
        write_pgm(pair.mask, out / f"msk_{i:04d}.pgm")
    splits = make_splits(pool_size, split_seed(master_seed, task_id))
    lines = [f"{name} = " + " ".join(str(i) for i in ids)
             for name, ids in (("test", splits.test_ids), ("val", splits.val_ids),
                               ("context", splits.context_ids))]
    (out / "splits.txt").write_text("\n".join(lines) + "\n")
    fields = [f"{f.name} = {getattr(spec, f.name)!r}" if isinstance(getattr(spec, f.name), float)
              else f"{f.name} = {getattr(spec, f.name)}" for f in dataclasses.fields(spec)]
    (out / "task.txt").write_text("\n".join(fields + [f"pool_size = {pool_size}", f"side = {side}"]) + "\n")
    return out


def export_dataset(root: Union[str, Path], master_seed: int, num_tasks: int, pool_size: int,
                   side: int = 64) -> list[Path]:
    return [export_task(root, master_seed, t, pool_size, side) for t in range(num_tasks)]


@dataclass
class TaskData:
    task_id: int
    images: list
    masks: list
    splits: SplitSpec

    def pairs(self, ids) -> list[ContextPair]:
        return [ContextPair(self.images[i], self.masks[i]) for i in ids]

    @property
    def pool(self) -> list[ContextPair]:
        return self.pairs(self.splits.context_ids)


def _ids(text: str) -> tuple:
    return tuple(int(v) for v in text.split())


def load_task(path: Union[str, Path]) -> TaskData:
    path = Path(path)
    meta = parse_config((path / "task.txt").read_text())[""]
    raw = parse_config((path / "splits.txt").read_text())[""]
    splits = SplitSpec(_ids(raw["test"]), _ids(raw["val"]), _ids(raw["context"]))
    n = int(meta["pool_size"])
    images = [read_pgm(path / f"img_{i:04d}.pgm") for i in range(n)]
    # masks are stored as 0/255 bytes; re-binarise to exact {0, 1}
    masks = [(read_pgm(path / f"msk_{i:04d}.pgm") > 0.5).astype(np.float32) for i in range(n)]
    return TaskData(int(meta["task_id"]), images, masks, splits)


def task_dirs(root: Union[str, Path]) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("task_"))


def missing_dataset_files(root: Union[str, Path]) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        return [str(root)]
    dirs = task_dirs(root)
    if not dirs:
        return [str(root / "task_*")]
    missing = []
    for d in dirs:
        for name in ("splits.txt", "task.txt"):
            if not (d / name).is_file():
                missing.append(str(d / name))
        meta = d / "task.txt"
        if meta.is_file():
            n = int(parse_config(meta.read_text())[""]["pool_size"])
            for i in range(n):
                for stem in ("img", "msk"):
                    f = d / f"{stem}_{i:04d}.pgm"
                    if not f.is_file():
                        missing.append(str(f))
    return missing


def load_dataset(root: Union[str, Path]) -> list[TaskData]:
    return [load_task(d) for d in task_dirs(root)]
