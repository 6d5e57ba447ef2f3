"""Session fixture running the full command-line pipeline twice.

The pipeline trains a 5000-step checkpoint, which takes minutes, so results are
cached under ``.pipeline_cache`` (override with CCV_PIPELINE_CACHE) keyed by a
hash of the sources each stage depends on.
"""

import hashlib
import json
import os
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src" / "ccv"
CACHE = Path(os.environ.get("CCV_PIPELINE_CACHE", ROOT / ".pipeline_cache"))

# sources that determine the dataset and the trained checkpoint
TRAIN_SOURCES = ["tensor", "net", "synthetic.py", "metrics.py", "trainer.py",
                 "harness/dataset.py", "harness/pgm.py", "harness/cli.py"]

DATA_ARGS = ["--seed", "1", "--tasks", "5", "--pool", "50"]
ABLATION_QUERIES = 2


def source_hash(entries) -> str:
    h = hashlib.sha256()
    for entry in entries:
        path = SRC / entry
        files = sorted(path.rglob("*.py")) if path.is_dir() else [path]
        for f in files:
            h.update(str(f.relative_to(SRC)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def ccv(*args) -> float:
    """Run the CLI in a single-threaded subprocess; returns wall seconds."""
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1",
               PYTHONPATH=str(ROOT / "src"))
    start = time.perf_counter()
    subprocess.run([sys.executable, "-m", "ccv", *map(str, args)], check=True, env=env,
                   stdout=subprocess.DEVNULL)
    return time.perf_counter() - start


def staged(directory: Path, build) -> dict:
    """Run ``build(tmp_dir)`` once; its returned dict is stored next to the outputs."""
    marker = directory / "stage.json"
    if marker.is_file():
        return json.loads(marker.read_text())
    tmp = directory.with_name(directory.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    info = build(tmp)
    (tmp / "stage.json").write_text(json.dumps(info))
    shutil.rmtree(directory, ignore_errors=True)
    tmp.rename(directory)
    return info


def build_training(d: Path) -> dict:
    ccv("gen-data", "--out", d / "data", *DATA_ARGS)
    seconds = ccv("train", "--out", d / "model.ccvw", "--log", d / "train_log.csv")
    return {"train_seconds": seconds}


def build_eval(d: Path, train: Path) -> dict:
    ckpt = train / "model.ccvw"
    before = file_hash(ckpt)
    seconds = ccv("eval", "--checkpoint", ckpt, "--data", train / "data", "--out", d,
                  "--single-thread", "--no-timing")
    return {"eval_seconds": seconds, "hash_before": before, "hash_after": file_hash(ckpt)}


def build_ablation(d: Path, train: Path) -> dict:
    seconds = ccv("ablate", "--checkpoint", train / "model.ccvw", "--data", train / "data", "--out", d,
                  "--single-thread", "--max-queries", ABLATION_QUERIES)
    return {"ablate_seconds": seconds}


@dataclass
class PipelineRun:
    train_dir: Path
    eval_dir: Path
    info: dict

    @property
    def data(self) -> Path:
        return self.train_dir / "data"

    @property
    def checkpoint(self) -> Path:
        return self.train_dir / "model.ccvw"

    @property
    def train_log(self) -> Path:
        return self.train_dir / "train_log.csv"


@dataclass
class Pipeline:
    first: PipelineRun
    second: PipelineRun
    ablation_dir: Path
    ablation_info: dict


def build_pipeline() -> Pipeline:
    train_key = source_hash(TRAIN_SOURCES)
    eval_key = source_hash(["."])
    runs = []
    for i in (1, 2):
        tdir = CACHE / f"train-{train_key}" / f"run{i}"
        tinfo = staged(tdir, build_training)
        edir = CACHE / f"eval-{eval_key}" / f"run{i}"
        einfo = staged(edir, lambda d, t=tdir: build_eval(d, t))
        runs.append(PipelineRun(tdir, edir, {**tinfo, **einfo}))
    adir = CACHE / f"eval-{eval_key}" / "ablation"
    ainfo = staged(adir, lambda d: build_ablation(d, runs[0].train_dir))
    return Pipeline(runs[0], runs[1], adir, ainfo)


@pytest.fixture(scope="session")
def pipeline() -> Pipeline:
    return build_pipeline()


@pytest.fixture(scope="session")
def trained(pipeline):
    from ccv.net import load_checkpoint
    return load_checkpoint(pipeline.first.checkpoint)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
