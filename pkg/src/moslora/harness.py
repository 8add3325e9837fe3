"""Teacher-student regression tasks and the method/initialization sweep."""

from __future__ import annotations

import csv
import enum
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from moslora.adapter import AdapterConfig, MixerKind, new_adapter, param_count
from moslora.dynamics import TrainConfig, train
from moslora.matrix import InitKind, Matrix, Rng, as_matrix, matmul

CSV_HEADER = (
    "method",
    "mixer_init",
    "rank",
    "seed",
    "final_loss",
    "best_loss",
    "steps_to_90pct",
    "param_count",
    "wall_ms",
)
NO_INIT = "none"
NEVER = "never"
DIVERGED = "diverged"


class TargetKind(enum.Enum):
    LOW_RANK_PLAIN = "plain"
    LOW_RANK_MIXED = "mixed"


class Method(enum.Enum):
    LORA = "LoRA"
    TS_MIXING = "TSMixing"
    MOSLORA_FIXED_ORTH = "MoSLoRA-fixed-orth"
    MOSLORA_LEARNABLE = "MoSLoRA-learnable"

    @classmethod
    def parse(cls, name: str) -> Method:
        for m in cls:
            if m.value.lower() == name.strip().lower():
                return m
        raise ValueError(f"unknown method {name!r}; expected one of {[m.value for m in cls]}")

    def mixer(self, init: InitKind | None = None) -> MixerKind:
        if self is Method.LORA:
            return MixerKind.identity()
        if self is Method.TS_MIXING:
            return MixerKind.butterfly()
        if self is Method.MOSLORA_FIXED_ORTH:
            return MixerKind.orthogonal()
        return MixerKind.learnable(init if init is not None else InitKind.KAIMING_UNIFORM)


@dataclass(frozen=True)
class TaskSpec:
    d1: int = 16
    d2: int = 16
    n_train: int = 256
    n_eval: int = 64
    k: int = 4
    target_kind: TargetKind = TargetKind.LOW_RANK_PLAIN
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.d1, self.d2, self.k, self.n_train, self.n_eval) < 1:
            raise ValueError("d1, d2, k, n_train and n_eval must all be >= 1")
        if self.k > min(self.d1, self.d2):
            raise ValueError(f"target rank k={self.k} exceeds min(d1, d2)={min(self.d1, self.d2)}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


class Task(NamedTuple):
    W0: Matrix
    x_train: Matrix
    y_train: Matrix
    x_eval: Matrix
    y_eval: Matrix


def planted_update(spec: TaskSpec) -> Matrix:
    """The teacher's low-rank update ``A* @ W* @ B*`` with Gaussian factors."""
    rng = Rng(spec.seed)
    a = rng.stream("task/A*").standard_normal((spec.d1, spec.k))
    b = rng.stream("task/B*").standard_normal((spec.k, spec.d2))
    if spec.target_kind is TargetKind.LOW_RANK_PLAIN:
        w = np.eye(spec.k)
    else:
        w = rng.stream("task/W*").standard_normal((spec.k, spec.k))
    return matmul(matmul(a, w), b)


def make_task(spec: TaskSpec) -> Task:
    rng = Rng(spec.seed)
    W0 = rng.stream("task/W0").normal(0.0, 1.0 / np.sqrt(spec.d1), size=(spec.d1, spec.d2))
    target = W0 + planted_update(spec)

    def sample(split: str, n: int) -> tuple[Matrix, Matrix]:
        x = rng.stream(f"task/x_{split}").standard_normal((n, spec.d1))
        y = matmul(x, target)
        if spec.noise_std > 0:
            y = y + spec.noise_std * rng.stream(f"task/noise_{split}").standard_normal(y.shape)
        return as_matrix(x), as_matrix(y)

    x_train, y_train = sample("train", spec.n_train)
    x_eval, y_eval = sample("eval", spec.n_eval)
    return Task(as_matrix(W0), x_train, y_train, x_eval, y_eval)


@dataclass(frozen=True)
class SweepSpec:
    methods: tuple[Method, ...]
    ranks: tuple[int, ...]
    seeds: tuple[int, ...]
    train: TrainConfig
    task: TaskSpec
    inits: tuple[InitKind, ...] = (InitKind.KAIMING_UNIFORM,)
    alpha: float = 0.0
    record_timing: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("methods", "ranks", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"sweep {name} must be non-empty")
        if Method.MOSLORA_LEARNABLE in self.methods and not self.inits:
            raise ValueError("sweep inits must be non-empty for the learnable mixer")
        if Method.TS_MIXING in self.methods and any(r % 2 for r in self.ranks):
            raise ValueError("TSMixing needs even ranks")

    def cells(self) -> list[tuple[Method, InitKind | None, int, int]]:
        out = []
        for method in self.methods:
            inits = self.inits if method is Method.MOSLORA_LEARNABLE else (None,)
            for init in inits:
                for rank in self.ranks:
                    for seed in self.seeds:
                        out.append((method, init, rank, seed))
        return sorted(out, key=_cell_key)


def _cell_key(cell: tuple[Method, InitKind | None, int, int]) -> tuple:
    method, init, rank, seed = cell
    return (list(Method).index(method), -1 if init is None else int(init), rank, seed)


@dataclass(frozen=True)
class ReportRow:
    method: str
    mixer_init: str
    rank: int
    seed: int
    final_loss: float
    best_loss: float
    steps_to_90pct: int | None
    param_count: int
    wall_ms: float = 0.0
    diverged: bool = False

    def csv_fields(self) -> list[str]:
        if self.diverged:
            reached = DIVERGED
        else:
            reached = NEVER if self.steps_to_90pct is None else str(self.steps_to_90pct)
        return [
            self.method,
            self.mixer_init,
            str(self.rank),
            str(self.seed),
            _fmt(self.final_loss),
            _fmt(self.best_loss),
            reached,
            str(self.param_count),
            _fmt(self.wall_ms),
        ]


@dataclass(frozen=True)
class Report:
    rows: tuple[ReportRow, ...] = field(default=())


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def steps_to_fraction(losses: list[float], fraction: float = 0.9) -> int | None:
    """First step whose loss is at most ``(1 - fraction)`` of the initial loss."""
    threshold = losses[0] - fraction * losses[0]
    for step, loss in enumerate(losses):
        if loss <= threshold:
            return step
    return None


def _run_cell(args: tuple) -> ReportRow:
    spec, (method, init, rank, seed) = args
    task = make_task(spec.task)
    config = AdapterConfig(spec.task.d1, spec.task.d2, rank, method.mixer(init), spec.alpha, seed)
    start = time.perf_counter()
    log = train(new_adapter(config), task.W0, task, spec.train)
    elapsed = (time.perf_counter() - start) * 1000.0 if spec.record_timing else 0.0
    losses = log.losses
    return ReportRow(
        method=method.value,
        mixer_init=NO_INIT if init is None else init.label,
        rank=rank,
        seed=seed,
        final_loss=losses[-1],
        best_loss=min(losses),
        steps_to_90pct=steps_to_fraction(losses),
        param_count=param_count(config),
        wall_ms=elapsed,
        diverged=log.diverged,
    )


def run_sweep(spec: SweepSpec) -> Report:
    """Train every (method, init, rank, seed) cell; rows follow ``spec.cells()``.

    The task is fixed by ``spec.task.seed``; sweep seeds vary the adapter
    initialization only.
    """
    jobs = [(spec, cell) for cell in spec.cells()]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]
    return Report(tuple(rows))


def report_to_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in report.rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def emit_csv(report: Report, path: str | os.PathLike) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report_to_csv(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_csv(path: str | os.PathLike) -> Report:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            reached = rec[6]
            rows.append(
                ReportRow(
                    method=rec[0],
                    mixer_init=rec[1],
                    rank=int(rec[2]),
                    seed=int(rec[3]),
                    final_loss=float(rec[4]),
                    best_loss=float(rec[5]),
                    steps_to_90pct=None if reached in (NEVER, DIVERGED) else int(reached),
                    param_count=int(rec[7]),
                    wall_ms=float(rec[8]),
                    diverged=reached == DIVERGED,
                )
            )
    return Report(tuple(rows))


_SPEC_KEYS = {
    "methods", "inits", "ranks", "seeds", "eta", "steps", "alpha", "timing", "workers",
    "d1", "d2", "n_train", "n_eval", "k", "target", "noise_std", "task_seed",
}


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_sweep_spec(text: str) -> SweepSpec:
    """Parse a ``key=value`` sweep file; ``#`` starts a comment.

    Lists are comma separated. Example::

        methods = LoRA, TSMixing, MoSLoRA-learnable
        inits = kaiming, orthogonal, zeros
        ranks = 4
        seeds = 0, 1
        eta = 0.05
        steps = 2000
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in _SPEC_KEYS:
            raise ValueError(f"line {lineno}: unrecognized entry {raw.strip()!r}")
        values[key] = value.strip()

    task = TaskSpec(
        d1=int(values.get("d1", 16)),
        d2=int(values.get("d2", 16)),
        n_train=int(values.get("n_train", 256)),
        n_eval=int(values.get("n_eval", 64)),
        k=int(values.get("k", 4)),
        target_kind=TargetKind(values.get("target", "plain")),
        noise_std=float(values.get("noise_std", 0.0)),
        seed=int(values.get("task_seed", 0)),
    )
    return SweepSpec(
        methods=tuple(Method.parse(m) for m in _split(values.get("methods", "LoRA"))),
        inits=tuple(InitKind.parse(i) for i in _split(values.get("inits", "kaiming"))),
        ranks=tuple(int(r) for r in _split(values.get("ranks", "4"))),
        seeds=tuple(int(s) for s in _split(values.get("seeds", "0"))),
        train=TrainConfig(eta=float(values.get("eta", 0.05)), steps=int(values.get("steps", 1000))),
        task=task,
        alpha=float(values.get("alpha", 0.0)),
        record_timing=values.get("timing", "false").lower() in ("1", "true", "yes"),
        workers=int(values.get("workers", 1)),
    )
