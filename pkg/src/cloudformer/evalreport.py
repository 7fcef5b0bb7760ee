"""Metrics, multi-seed studies, error-band histograms, and report files.

All error metrics live on the percentage-point scale: label units are
multiplied by 100 before squaring/averaging, so a model that is off by
0.078 on a label in (0, 1] reports an MAE of 7.8.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import METHODS as BASELINE_METHODS
from .baselines import run_baseline
from .model import CloudFormerConfig, CloudFormerParams, forward
from .nncore import no_grad
from .preprocess import (
    CANONICAL_SEEDS,
    NormStats,
    SplitSpec,
    fit_norm,
    make_split,
    normalize_run,
    pad_batch,
)
from .traceio import RunRecord, TraceDataset
from .train import TrainConfig, train_loop

__all__ = [
    "BAND_EDGES", "BAND_LABELS", "CF_METHODS", "ALL_METHODS", "HEATMAP_CAP",
    "mse", "mae", "error_bands", "cumulative_bands", "predict_runs",
    "StudyConfig", "EvalReport", "run_matrix", "emit",
]

BAND_EDGES = (5.0, 10.0, 15.0, 20.0, 25.0)
BAND_LABELS = ("lt5", "lt10", "lt15", "lt20", "lt25", "ge25")
HEATMAP_CAP = 20.0

CF_METHODS = ("cf", "cf_temporal", "cf_system")
ALL_METHODS = BASELINE_METHODS + CF_METHODS

_CF_VARIANT = {"cf": "full", "cf_temporal": "temporal_only",
               "cf_system": "system_only"}


def _errors_pp(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise ValueError("empty prediction vector")
    if pred.size != target.size:
        raise ValueError(f"length mismatch: {pred.size} vs {target.size}")
    return (pred - target) * 100.0


def mse(pred, target) -> float:
    e = _errors_pp(pred, target)
    return float((e * e).mean())


def mae(pred, target) -> float:
    return float(np.abs(_errors_pp(pred, target)).mean())


def error_bands(pred, target) -> np.ndarray:
    """Fractions in the disjoint bins [0,5), [5,10), ... [20,25), [25,inf)."""
    e = np.abs(_errors_pp(pred, target))
    idx = np.searchsorted(np.asarray(BAND_EDGES), e, side="right")
    counts = np.bincount(idx, minlength=len(BAND_LABELS))
    return counts / e.size


def cumulative_bands(bands: np.ndarray) -> np.ndarray:
    """Running totals, so entry k is the mass with error below edge k+1."""
    return np.cumsum(bands)


def predict_runs(params: CloudFormerParams, config: CloudFormerConfig,
                 runs: list[RunRecord], stats: NormStats,
                 batch_size: int = 16) -> np.ndarray:
    """Inference over runs in their given order (no length re-sorting)."""
    norm = [normalize_run(r, stats) for r in runs]
    preds = []
    with no_grad():
        for i in range(0, len(norm), batch_size):
            batch = pad_batch(norm[i:i + batch_size])
            preds.append(forward(batch, params, config, False).data.reshape(-1))
    return np.concatenate(preds)


@dataclass(frozen=True)
class StudyConfig:
    """Everything run_matrix needs besides the dataset itself."""

    methods: tuple[str, ...] = ("lr", "glr", "dt", "rf", "lstm", "cf")
    seeds: tuple[int, ...] = CANONICAL_SEEDS
    model: CloudFormerConfig | None = None
    train: TrainConfig | None = None
    lstm_hidden: int = 64
    lstm_train: TrainConfig | None = None
    budget: int = 50
    k_folds: int = 3
    batch_size: int = 16
    jobs: int = 1

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; known: {ALL_METHODS}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class EvalReport:
    """Per-cell metrics plus cross-seed aggregates and band histograms.

    cells: one dict per (seed, method, app) with n/mae/mse.
    pooled: one dict per (seed, method) over all that seed's test samples.
    aggregate[method]: mean/std (population, across seeds) of pooled MAE/MSE.
    bands[method]: disjoint and cumulative fractions over all seeds' errors.
    """

    schema_version: int = 1
    methods: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    test_apps: dict[str, list[str]] = field(default_factory=dict)
    cells: list[dict] = field(default_factory=list)
    pooled: list[dict] = field(default_factory=list)
    aggregate: dict[str, dict] = field(default_factory=dict)
    bands: dict[str, dict] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))

    def aggregate_mae(self, method: str) -> float:
        return self.aggregate[method]["mae_mean"]

    def band_mass(self, method: str, upto: str = "lt10") -> float:
        k = BAND_LABELS.index(upto)
        return float(sum(self.bands[method]["fractions"][:k + 1]))


def _predict_method(method: str, dataset: TraceDataset, split: SplitSpec,
                    seed: int, stats: NormStats, cfg: StudyConfig,
                    ) -> tuple[np.ndarray, dict]:
    test_runs = dataset.runs_for(split.test_apps)
    if method in CF_METHODS:
        variant = _CF_VARIANT[method]
        base = cfg.model or CloudFormerConfig(S=dataset.schema.n_cols)
        mcfg = CloudFormerConfig(**{**asdict(base), "variant": variant})
        tcfg = cfg.train or TrainConfig(seed=seed)
        if tcfg.seed != seed:
            tcfg = TrainConfig(**{**asdict(tcfg), "seed": seed})
        params, stats_out, log = train_loop(variant, dataset, split,
                                            model_config=mcfg,
                                            train_config=tcfg, stats=stats)
        pred = predict_runs(params, mcfg, test_runs, stats_out, cfg.batch_size)
        return pred, {"best_epoch": log.best_epoch,
                      "best_val_mae": log.best_val_mae,
                      "epochs_run": len(log.epochs)}
    res = run_baseline(method, dataset, split, seed=seed, budget=cfg.budget,
                       k_folds=cfg.k_folds, stats=stats,
                       lstm_hidden=cfg.lstm_hidden, lstm_train=cfg.lstm_train)
    return res.pred_test, {"hyperparams": res.hyperparams, **res.extras}


def run_matrix(dataset: TraceDataset, config: StudyConfig) -> EvalReport:
    """The full seeds x methods study on one dataset.

    For every seed a fresh app split is drawn, every method trains on the
    same split and normalization stats, and metrics are recorded per test
    app, per seed, and aggregated across seeds.
    """
    report = EvalReport(methods=list(config.methods),
                        seeds=[int(s) for s in config.seeds])
    pooled_by_method: dict[str, dict[int, tuple[float, float]]] = {
        m: {} for m in config.methods}
    errors_by_method: dict[str, list[np.ndarray]] = {m: [] for m in config.methods}
    per_seed: dict[int, tuple[SplitSpec, NormStats]] = {}
    for seed in config.seeds:
        split = make_split(dataset, seed)
        report.test_apps[str(seed)] = list(split.test_apps)
        per_seed[seed] = (split, fit_norm(dataset.runs_for(split.train_apps)))

    cells = [(seed, method) for seed in config.seeds for method in config.methods]

    def work(cell):
        seed, method = cell
        split, stats = per_seed[seed]
        return _predict_method(method, dataset, split, seed, stats, config)

    # Cell order, and therefore every emitted artifact, is independent of
    # the worker count; only wall time varies.
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    for (seed, method), (pred, extra) in zip(cells, results):
        split, _ = per_seed[seed]
        test_runs = dataset.runs_for(split.test_apps)
        y = np.array([r.label_P for r in test_runs])
        apps = np.array([r.app_id for r in test_runs])
        if pred.shape != y.shape:
            raise ValueError(f"{method} returned {pred.shape}, "
                             f"expected {y.shape}")
        for app in split.test_apps:
            sel = apps == app
            report.cells.append({
                "seed": int(seed), "method": method, "app": app,
                "n": int(sel.sum()),
                "mae": mae(pred[sel], y[sel]),
                "mse": mse(pred[sel], y[sel]),
            })
        report.pooled.append({
            "seed": int(seed), "method": method, "n": int(y.size),
            "mae": mae(pred, y), "mse": mse(pred, y),
            "extras": extra,
        })
        pooled_by_method[method][seed] = (mae(pred, y), mse(pred, y))
        errors_by_method[method].append(np.abs((pred - y) * 100.0))
    for method in config.methods:
        maes = np.array([pooled_by_method[method][s][0] for s in config.seeds])
        mses = np.array([pooled_by_method[method][s][1] for s in config.seeds])
        report.aggregate[method] = {
            "mae_mean": float(maes.mean()), "mae_std": float(maes.std()),
            "mse_mean": float(mses.mean()), "mse_std": float(mses.std()),
        }
        err = np.concatenate(errors_by_method[method])
        idx = np.searchsorted(np.asarray(BAND_EDGES), err, side="right")
        frac = np.bincount(idx, minlength=len(BAND_LABELS)) / err.size
        report.bands[method] = {
            "fractions": [float(f) for f in frac],
            "cumulative": [float(f) for f in np.cumsum(frac)],
            "n": int(err.size),
        }
    return report


def _csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def emit(report: EvalReport, out_dir: Path) -> list[Path]:
    """Write report.json, table.csv, bands.csv, per-seed heatmap CSVs, and
    a markdown summary. Returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    p = out / "report.json"
    report.to_json(p)
    written.append(p)

    p = out / "table.csv"
    rows = [[m,
             report.aggregate[m]["mse_mean"], report.aggregate[m]["mse_std"],
             report.aggregate[m]["mae_mean"], report.aggregate[m]["mae_std"]]
            for m in report.methods]
    _csv(p, ["method", "mse_mean", "mse_std", "mae_mean", "mae_std"], rows)
    written.append(p)

    p = out / "bands.csv"
    rows = []
    for m in report.methods:
        b = report.bands[m]
        rows.append([m, *b["fractions"], *b["cumulative"], b["n"]])
    _csv(p, ["method", *BAND_LABELS, *[f"cum_{x}" for x in BAND_LABELS], "n"],
         rows)
    written.append(p)

    for seed in report.seeds:
        apps = report.test_apps[str(seed)]
        cell = {(c["method"], c["app"]): c["mae"] for c in report.cells
                if c["seed"] == seed}
        rows = [[m, *[min(cell[(m, a)], HEATMAP_CAP) for a in apps]]
                for m in report.methods]
        p = out / f"heatmap_seed{seed}.csv"
        _csv(p, ["method", *apps], rows)
        written.append(p)

    p = out / "report.md"
    lines = ["# Evaluation report", "",
             f"Seeds: {', '.join(str(s) for s in report.seeds)}", "",
             "| method | MSE (mean +/- std) | MAE (mean +/- std) |",
             "|---|---|---|"]
    for m in report.methods:
        a = report.aggregate[m]
        lines.append(f"| {m} | {a['mse_mean']:.2f} +/- {a['mse_std']:.2f} "
                     f"| {a['mae_mean']:.2f} +/- {a['mae_std']:.2f} |")
    lines += ["", "Error-band mass (cumulative, percent of test samples):", ""]
    lines.append("| method | " + " | ".join(f"<{int(e)}" for e in BAND_EDGES) + " |")
    lines.append("|---|" + "---|" * len(BAND_EDGES))
    for m in report.methods:
        cum = report.bands[m]["cumulative"][:len(BAND_EDGES)]
        lines.append(f"| {m} | " + " | ".join(f"{100*f:.1f}" for f in cum) + " |")
    lines.append("")
    p.write_text("\n".join(lines))
    written.append(p)
    return written
