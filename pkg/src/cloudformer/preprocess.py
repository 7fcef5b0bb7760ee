"""Normalization, application-level train/test splits, padded batches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import substream
from .traceio import MIXED, STATIC_ONLY, MetricSchema, RunRecord, TraceDataset

STD_FLOOR = 1e-8

# The split protocol is repeated over six canonical seeds.
CANONICAL_SEEDS = (0, 1, 2, 3, 4, 5)

TRAIN_STATIC_ONLY = 4
TRAIN_MIXED = 3
TEST_STATIC_ONLY = 2
TEST_MIXED = 2


@dataclass
class NormStats:
    """Per-metric z-score statistics, fit on training runs only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D and aligned")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"std entries must be floored at {STD_FLOOR}")

    def to_csv(self, path: Path, schema: MetricSchema) -> None:
        lines = ["metric,mean,std"]
        for name, m, s in zip(schema.column_names, self.mean, self.std):
            lines.append(f"{name},{float(m)!r},{float(s)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: Path) -> "NormStats":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "metric,mean,std":
            raise ValueError(f"{path}: bad stats header")
        means, stds = [], []
        for line in lines[1:]:
            _, m, s = line.split(",")
            means.append(float(m))
            stds.append(float(s))
        return cls(np.array(means), np.array(stds))


def fit_norm(train) -> NormStats:
    """Population mean/std per metric over all valid seconds of training runs.

    Accepts a TraceDataset or a list of RunRecords. Accumulation runs in run
    order so results are reproducible bit for bit.
    """
    runs = train.runs if isinstance(train, TraceDataset) else list(train)
    if not runs:
        raise ValueError("cannot fit normalization on an empty training set")
    n_rows = runs[0].matrix.shape[0]
    total = 0
    acc = np.zeros(n_rows)
    acc_sq = np.zeros(n_rows)
    for run in runs:
        if run.matrix.shape[0] != n_rows:
            raise ValueError("runs disagree on metric count")
        acc += run.matrix.sum(axis=1)
        acc_sq += (run.matrix**2).sum(axis=1)
        total += run.matrix.shape[1]
    mean = acc / total
    var = np.maximum(acc_sq / total - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def apply_norm(run: RunRecord, stats: NormStats) -> np.ndarray:
    """Z-scored copy of the run's matrix."""
    if run.matrix.shape[0] != stats.mean.shape[0]:
        raise ValueError(
            f"run has {run.matrix.shape[0]} metric rows, stats expect {stats.mean.shape[0]}"
        )
    return (run.matrix - stats.mean[:, None]) / stats.std[:, None]


@dataclass
class NormalizedRun:
    matrix: np.ndarray  # metrics x T, z-scored
    label: float
    app_id: str = ""


def normalize_run(run: RunRecord, stats: NormStats) -> NormalizedRun:
    return NormalizedRun(matrix=apply_norm(run, stats), label=run.label_P, app_id=run.app_id)


@dataclass(frozen=True)
class SplitSpec:
    """Application-level split: 4+3 train apps, 2+2 unseen test apps."""

    seed: int
    train_apps: tuple[str, ...]
    test_apps: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_apps) & set(self.test_apps):
            raise ValueError("train and test apps overlap")

    def to_json(self, path: Path) -> None:
        payload = {
            "seed": self.seed,
            "train_apps": list(self.train_apps),
            "test_apps": list(self.test_apps),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: Path) -> "SplitSpec":
        payload = json.loads(Path(path).read_text())
        return cls(
            seed=int(payload["seed"]),
            train_apps=tuple(payload["train_apps"]),
            test_apps=tuple(payload["test_apps"]),
        )


def make_split(dataset: TraceDataset, seed: int) -> SplitSpec:
    """Uniformly random split honoring the static-only/mixed composition."""
    static_apps = dataset.app_ids(STATIC_ONLY)
    mixed_apps = dataset.app_ids(MIXED)
    need_static = TRAIN_STATIC_ONLY + TEST_STATIC_ONLY
    need_mixed = TRAIN_MIXED + TEST_MIXED
    if len(static_apps) < need_static or len(mixed_apps) < need_mixed:
        raise ValueError(
            f"cannot satisfy composition: need {need_static} static_only and "
            f"{need_mixed} mixed apps, have {len(static_apps)} and {len(mixed_apps)}"
        )
    rng = substream(seed, "split")
    static_perm = [static_apps[i] for i in rng.permutation(len(static_apps))]
    mixed_perm = [mixed_apps[i] for i in rng.permutation(len(mixed_apps))]
    test = static_perm[:TEST_STATIC_ONLY] + mixed_perm[:TEST_MIXED]
    train = (
        static_perm[TEST_STATIC_ONLY:TEST_STATIC_ONLY + TRAIN_STATIC_ONLY]
        + mixed_perm[TEST_MIXED:TEST_MIXED + TRAIN_MIXED]
    )
    return SplitSpec(seed=seed, train_apps=tuple(train), test_apps=tuple(test))


@dataclass
class Batch:
    """Padded mini-batch: values are zero wherever the mask is off."""

    values: np.ndarray   # B x T_max x S
    mask: np.ndarray     # B x T_max, bool
    labels: np.ndarray   # B
    lengths: np.ndarray  # B

    @property
    def size(self) -> int:
        return self.values.shape[0]


def pad_batch(runs: list[NormalizedRun]) -> Batch:
    if not runs:
        raise ValueError("cannot batch an empty run list")
    n_metrics = runs[0].matrix.shape[0]
    lengths = np.array([r.matrix.shape[1] for r in runs], dtype=np.int64)
    t_max = int(lengths.max())
    B = len(runs)
    values = np.zeros((B, t_max, n_metrics))
    mask = np.zeros((B, t_max), dtype=bool)
    labels = np.empty(B)
    for b, run in enumerate(runs):
        if run.matrix.shape[0] != n_metrics:
            raise ValueError("runs in a batch must share the schema")
        T = run.matrix.shape[1]
        values[b, :T, :] = run.matrix.T
        mask[b, :T] = True
        labels[b] = run.label
    return Batch(values=values, mask=mask, labels=labels, lengths=lengths)


def make_batches(
    runs: list[NormalizedRun],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Length-bucketed batches to bound padding waste.

    Runs are sorted by duration (stable), chunked, and the chunk order is
    optionally shuffled. Bucketing changes only grouping, never values.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(range(len(runs)), key=lambda i: (runs[i].matrix.shape[1], i))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None and len(chunks) > 1:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [pad_batch([runs[i] for i in chunk]) for chunk in chunks]
