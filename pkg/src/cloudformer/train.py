"""Loss, optimizer, LR schedule, and the training loop.

The loop in `fit` is model-agnostic: it drives any closure that maps a
Batch to a prediction tensor over a flat dict of parameter tensors. The
network-specific entry point `train_loop` wires it to the dual-branch
model, carving a per-app validation slice out of the training apps for
early stopping.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._rng import substream
from .model import CloudFormerConfig, CloudFormerParams, forward, init_params
from .nncore import NonFiniteError, Tensor, backward, log_cosh, no_grad
from .preprocess import (
    Batch,
    NormStats,
    SplitSpec,
    fit_norm,
    make_batches,
    normalize_run,
)
from .traceio import TraceDataset

__all__ = [
    "TrainDivergenceError", "ScheduleConfig", "AdamState", "TrainConfig",
    "TrainLog", "logcosh_loss", "lr_at", "adam_step", "clip_gradients",
    "fit", "train_loop", "evaluate_batches",
]


class TrainDivergenceError(RuntimeError):
    """Training produced non-finite loss or gradients."""


def logcosh_loss(pred, target) -> Tensor:
    """Mean of log(cosh(pred - target)); linear in |error| for large errors."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.size == 0:
        raise ValueError("loss over empty vectors")
    if pred.data.size != target.size:
        raise ValueError(f"length mismatch: {pred.data.size} vs {target.size}")
    err = pred.reshape(pred.data.size) - Tensor(target.reshape(-1))
    return log_cosh(err).mean()


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warm-up to peak_lr over warmup_steps, then cosine to floor_lr."""

    warmup_steps: int
    total_steps: int
    peak_lr: float = 1e-5
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup ({self.warmup_steps}) < total "
                             f"({self.total_steps})")
        if not 0.0 <= self.floor_lr <= self.peak_lr:
            raise ValueError("need 0 <= floor_lr <= peak_lr")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    frac = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.floor_lr + (sched.peak_lr - sched.floor_lr) * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, Tensor]:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainDivergenceError(
                f"non-finite gradient for {name!r} ({bad} bad entries) "
                f"at optimizer step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_gradients(grads: dict[str, np.ndarray],
                   max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    peak_lr: float = 1e-5
    floor_lr: float = 0.0
    warmup_frac: float = 0.05
    patience: int = 20
    clip_norm: float | None = 1.0
    val_fraction: float = 0.15

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class TrainLog:
    """Per-epoch history. `epochs` entries carry epoch, step, train_loss,
    val_mse, val_mae, lr, wall_s; metric scale is percentage points."""

    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    stopped_early: bool = False
    total_steps: int = 0
    wall_time_s: float = 0.0

    def history(self) -> list[dict]:
        """Deterministic view: everything except wall-clock fields."""
        return [{k: v for k, v in e.items() if k != "wall_s"} for e in self.epochs]

    def to_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: Path) -> "TrainLog":
        return cls(**json.loads(Path(path).read_text()))


def evaluate_batches(forward_fn, batches: list[Batch]) -> tuple[float, float]:
    """(MSE, MAE) on the percentage-point scale, inference mode."""
    se = ae = n = 0.0
    with no_grad():
        for b in batches:
            pred = forward_fn(b, False, None).data.reshape(-1)
            err = (pred - b.labels) * 100.0
            se += float((err * err).sum())
            ae += float(np.abs(err).sum())
            n += err.size
    if n == 0:
        raise ValueError("no samples to evaluate")
    return se / n, ae / n


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def fit(forward_fn, params: dict[str, Tensor], train_batches: list[Batch],
        val_batches: list[Batch], cfg: TrainConfig) -> TrainLog:
    """Adam + warmup/cosine schedule + early stopping on validation MAE.

    forward_fn(batch, training, rng) must return predictions as a tensor
    whose graph reaches every entry of `params` that the variant uses.
    Mutates `params` in place, leaving the best-validation weights loaded.
    """
    if not train_batches:
        raise ValueError("training split is empty")
    if not val_batches:
        val_batches = train_batches
    steps_per_epoch = len(train_batches)
    total = cfg.epochs * steps_per_epoch
    sched = None
    if total >= 2:
        warm = min(max(1, round(cfg.warmup_frac * total)), total - 1)
        sched = ScheduleConfig(warmup_steps=warm, total_steps=total,
                               peak_lr=cfg.peak_lr, floor_lr=cfg.floor_lr)
    state = AdamState.init(params)
    log = TrainLog()
    best = _snapshot(params)
    patience_left = cfg.patience
    t_start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        order = substream(cfg.seed, "order", epoch).permutation(steps_per_epoch)
        drop_rng = substream(cfg.seed, "dropout", epoch)
        loss_sum = 0.0
        lr = cfg.peak_lr
        for bi in order:
            batch = train_batches[bi]
            try:
                pred = forward_fn(batch, True, drop_rng)
                loss = logcosh_loss(pred, batch.labels)
                for p in params.values():
                    p.grad = None
                backward(loss)
            except NonFiniteError as exc:
                raise TrainDivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: {exc}") from exc
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            if cfg.clip_norm is not None:
                grads, _ = clip_gradients(grads, cfg.clip_norm)
            lr = lr_at(min(step + 1, total), sched) if sched else cfg.peak_lr
            adam_step(params, grads, state, lr)
            loss_sum += float(loss.data)
            step += 1
        val_mse, val_mae = evaluate_batches(forward_fn, val_batches)
        log.epochs.append({
            "epoch": epoch,
            "step": step,
            "train_loss": loss_sum / steps_per_epoch,
            "val_mse": val_mse,
            "val_mae": val_mae,
            "lr": float(lr),
            "wall_s": time.perf_counter() - t_epoch,
        })
        if val_mae < log.best_val_mae - 1e-12:
            log.best_val_mae = val_mae
            log.best_epoch = epoch
            best = _snapshot(params)
            patience_left = cfg.patience
        else:
            patience_left -= 1
            if patience_left == 0:
                log.stopped_early = True
                break
    _restore(params, best)
    log.total_steps = step
    log.wall_time_s = time.perf_counter() - t_start
    return log


def _carve_validation(runs_by_app: dict[str, list], seed: int,
                      frac: float) -> tuple[list, list]:
    """Per-app holdout for early stopping; single-run apps stay in train."""
    train, val = [], []
    for app_id in sorted(runs_by_app):
        runs = runs_by_app[app_id]
        if len(runs) < 2 or frac == 0.0:
            train.extend(runs)
            continue
        k = min(max(1, round(frac * len(runs))), len(runs) - 1)
        order = substream(seed, "val-carve", app_id).permutation(len(runs))
        held = set(order[:k].tolist())
        for i, r in enumerate(runs):
            (val if i in held else train).append(r)
    return train, val


def train_loop(variant: str, dataset: TraceDataset, split: SplitSpec,
               model_config: CloudFormerConfig | None = None,
               train_config: TrainConfig | None = None,
               stats: NormStats | None = None,
               ) -> tuple[CloudFormerParams, NormStats, TrainLog]:
    """Train one model variant on the split's training apps.

    Deterministic given (seed, configs, data). Normalization statistics are
    fitted on the training runs only unless supplied.
    """
    cfg = train_config or TrainConfig()
    train_runs = dataset.runs_for(split.train_apps)
    if not train_runs:
        raise ValueError("training split has no runs")
    mcfg = model_config or CloudFormerConfig(S=dataset.schema.n_cols)
    if mcfg.variant != variant:
        mcfg = CloudFormerConfig(**{**asdict(mcfg), "variant": variant})
    if mcfg.S != dataset.schema.n_cols:
        raise ValueError(f"model expects {mcfg.S} columns, dataset has "
                         f"{dataset.schema.n_cols}")
    if stats is None:
        stats = fit_norm(train_runs)
    by_app: dict[str, list] = {}
    for r in train_runs:
        by_app.setdefault(r.app_id, []).append(normalize_run(r, stats))
    tr, va = _carve_validation(by_app, cfg.seed, cfg.val_fraction)
    train_batches = make_batches(tr, cfg.batch_size)
    val_batches = make_batches(va, cfg.batch_size) if va else []
    params = init_params(mcfg, cfg.seed)

    def forward_fn(batch, training, rng):
        return forward(batch, params, mcfg, training, rng)

    log = fit(forward_fn, params.tensors, train_batches, val_batches, cfg)
    return params, stats, log
