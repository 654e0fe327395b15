"""Multi-task datasets: synthetic teachers, CSV ingestion, splits and target scaling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import LabelOutOfRange, ParseError, ZeroVariance

TaskKind = Literal["regression", "binary", "multiclass"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskSpec:
    """A task's name, kind and arity (outputs for regression, classes for multiclass)."""

    name: str
    kind: TaskKind
    n_outputs: int = 1

    def __post_init__(self):
        if self.kind not in ("regression", "binary", "multiclass"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_outputs < 1 or (self.kind == "binary" and self.n_outputs != 1):
            raise ValueError(f"task {self.name}: invalid output count {self.n_outputs}")
        if self.kind == "multiclass" and self.n_outputs < 2:
            raise ValueError(f"task {self.name}: multiclass needs at least 2 classes")

    @property
    def n_columns(self) -> int:
        return self.n_outputs if self.kind == "regression" else 1

    def columns(self) -> list[str]:
        if self.n_columns == 1:
            return [self.name]
        return [f"{self.name}_{j}" for j in range(self.n_columns)]


@dataclass(frozen=True)
class SyntheticTask:
    name: str
    kind: TaskKind = "regression"
    n_outputs: int = 1
    noise: float = 0.1
    angle: float = 0.0      # degrees, rotation of the teacher away from the first task's
    scale: float = 1.0

    def spec(self) -> TaskSpec:
        return TaskSpec(self.name, self.kind, self.n_outputs)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 2000
    d_x: int = 8
    tasks: tuple[SyntheticTask, ...] = (SyntheticTask("t0"),)
    seed: int = 0
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)
    nonlinear: bool = False

    def __post_init__(self):
        for t in self.tasks:
            if not 0.0 <= t.angle <= 180.0:
                raise ValueError(f"task {t.name}: conflict angle must lie in [0, 180]")


@dataclass
class Dataset:
    x: np.ndarray
    labels: dict[str, np.ndarray]
    tasks: list[TaskSpec]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    norm_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        for t in self.tasks:
            lab = self.labels[t.name]
            if lab.shape[0] != n:
                raise ValueError(f"task {t.name} has {lab.shape[0]} labels for {n} rows")
            if t.kind == "regression" and lab.ndim == 1:
                self.labels[t.name] = lab[:, None]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def subset(self, split: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        idx = self.splits[split]
        return self.x[idx], {k: v[idx] for k, v in self.labels.items()}

    def select_tasks(self, names: Sequence[str]) -> "Dataset":
        tasks = [t for t in self.tasks if t.name in names]
        return replace(self, tasks=tasks, labels={t.name: self.labels[t.name] for t in tasks},
                       norm_stats={k: v for k, v in self.norm_stats.items() if k in names})


def _teacher_directions(rng: np.random.Generator, d_x: int) -> tuple[np.ndarray, np.ndarray]:
    u = rng.standard_normal(d_x)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(d_x)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    return u, v


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Linear (or tanh-warped) teachers whose first directions sit at the requested angles.

    Each task's first teacher vector is ``cos(angle) u + sin(angle) v`` for a
    shared orthonormal pair ``(u, v)``, so two tasks at 0 and 180 degrees have
    exactly opposite teachers.
    """
    rng = np.random.default_rng(spec.seed)
    u, v = _teacher_directions(rng, spec.d_x)
    x = rng.standard_normal((spec.n, spec.d_x))
    labels: dict[str, np.ndarray] = {}
    for task in spec.tasks:
        theta = np.deg2rad(task.angle)
        first = np.cos(theta) * u + np.sin(theta) * v
        n_dirs = task.n_outputs
        extra = rng.standard_normal((n_dirs - 1, spec.d_x)) / np.sqrt(spec.d_x)
        teacher = task.scale * np.vstack([first[None, :], extra])
        z = x @ teacher.T
        if spec.nonlinear:
            z = z + 0.5 * np.tanh(2.0 * z)
        if task.kind == "regression":
            labels[task.name] = z + task.noise * rng.standard_normal(z.shape)
        elif task.kind == "binary":
            p = 1.0 / (1.0 + np.exp(-z[:, 0]))
            labels[task.name] = (rng.random(spec.n) < p).astype(float)
        else:
            logits = z - z.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            cdf = np.cumsum(p, axis=1)
            draws = rng.random((spec.n, 1))
            labels[task.name] = np.minimum((draws > cdf).sum(axis=1), n_dirs - 1).astype(int)
    tasks = [t.spec() for t in spec.tasks]
    ds = Dataset(x, labels, tasks)
    ds.splits = make_splits(ds, spec.splits, spec.seed)
    return ds


def _split_counts(n: int, fractions: Sequence[float]) -> np.ndarray:
    frac = np.asarray(fractions, dtype=float)
    frac = frac / frac.sum()
    raw = frac * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _strata(ds: Dataset, n_bins: int = 10) -> np.ndarray:
    for t in ds.tasks:
        if t.kind != "regression":
            return ds.labels[t.name].astype(int).reshape(-1)
    if not ds.tasks:
        return np.zeros(ds.n, dtype=int)
    first = ds.labels[ds.tasks[0].name][:, 0]
    edges = np.quantile(first, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, first)


def make_splits(ds: Dataset, fractions: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> dict[str, np.ndarray]:
    """Disjoint stratified train/val/test indices with exact split sizes.

    Classification labels stratify when present, otherwise quantile bins of the
    first regression target. Rows are walked stratum by stratum and dealt to
    whichever split is furthest behind its quota.
    """
    rng = np.random.default_rng(seed)
    counts = _split_counts(ds.n, fractions)
    strata = _strata(ds)
    order = np.lexsort((rng.permutation(ds.n), strata))
    assigned = np.zeros(len(counts), dtype=int)
    buckets: list[list[int]] = [[] for _ in counts]
    for i, row in enumerate(order):
        deficit = counts * (i + 1) / ds.n - assigned
        deficit[assigned >= counts] = -np.inf
        s = int(np.argmax(deficit))
        assigned[s] += 1
        buckets[s].append(int(row))
    return {name: np.sort(np.array(b, dtype=int)) for name, b in zip(SPLITS, buckets)}


def write_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = [f"x{j}" for j in range(ds.x.shape[1])]
    for t in ds.tasks:
        header += t.columns()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.x[i]]
            for t in ds.tasks:
                lab = np.atleast_1d(ds.labels[t.name][i])
                if t.kind == "regression":
                    row += [repr(float(v)) for v in lab]
                else:
                    row.append(str(int(lab[0])))
            writer.writerow(row)


def load_csv(path: str | Path, tasks: Sequence[TaskSpec], fractions: Sequence[float] = (0.7, 0.1, 0.2),
             seed: int = 0) -> Dataset:
    """Read features followed by the declared task label columns.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    n_label_cols = sum(t.n_columns for t in tasks)
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required", row=1) from None
        width = len(header)
        if width <= n_label_cols:
            raise ParseError(f"{path}: {width} columns but {n_label_cols} label columns declared", row=1)
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != width:
                raise ParseError(f"{path}: row {lineno} has {len(raw)} fields, expected {width}", row=lineno)
            vals = []
            for col, cell in zip(header, raw):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r}",
                                     row=lineno, column=col) from None
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(-1, width)
    d_x = width - n_label_cols
    x = data[:, :d_x]
    labels: dict[str, np.ndarray] = {}
    col = d_x
    for t in tasks:
        block = data[:, col:col + t.n_columns]
        col += t.n_columns
        if t.kind == "regression":
            labels[t.name] = block
            continue
        lab = block[:, 0]
        limit = 2 if t.kind == "binary" else t.n_outputs
        bad = np.flatnonzero((lab != np.round(lab)) | (lab < 0) | (lab >= limit))
        if bad.size:
            r = int(bad[0])
            raise LabelOutOfRange(f"{path}: row {r + 2}, task {t.name}: label {lab[r]:g} outside [0, {limit})")
        labels[t.name] = lab.astype(float) if t.kind == "binary" else lab.astype(int)
    ds = Dataset(x, labels, list(tasks))
    ds.splits = make_splits(ds, fractions, seed)
    return ds


def normalize_targets(ds: Dataset, which: Sequence[str] | None = None) -> tuple[Dataset, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Standardize regression targets with train-split statistics (population std).

    Returns a new dataset and ``{task: (mean, std)}``; the same statistics are
    stored on the dataset for de-normalizing predictions.
    """
    names = [t.name for t in ds.tasks if t.kind == "regression"] if which is None else list(which)
    kinds = {t.name: t.kind for t in ds.tasks}
    train = ds.splits.get("train", np.arange(ds.n))
    labels = dict(ds.labels)
    stats = dict(ds.norm_stats)
    new_stats = {}
    for name in names:
        if kinds[name] != "regression":
            raise ValueError(f"task {name} is not a regression task")
        col = ds.labels[name]
        mean = col[train].mean(axis=0)
        std = col[train].std(axis=0)
        if np.any(std <= 1e-12 * np.maximum(1.0, np.abs(mean))):
            raise ZeroVariance(f"task {name} has zero variance on the train split")
        labels[name] = (col - mean) / std
        new_stats[name] = (mean, std)
        stats[name] = (mean, std)
    return replace(ds, labels=labels, norm_stats=stats), new_stats


def denormalize(ds: Dataset, name: str, values: np.ndarray) -> np.ndarray:
    if name not in ds.norm_stats:
        return values
    mean, std = ds.norm_stats[name]
    return values * std + mean
