"""Dual-branch transformer predicting per-run performance retention.

The temporal branch attends over per-second snapshots; the system branch
attends over per-metric time summaries. Each branch exposes a class-token
embedding, and a small fused head maps the concatenation to a scalar in
(0, 1). Single-branch variants reuse the same blocks with a narrower head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._rng import substream
from .nncore import (
    Tensor,
    concat,
    dense,
    dropout,
    layer_norm,
    multi_head_attention,
    positional_encoding,
    relu,
    sigmoid,
    swish,
)
from .nncore.tensor import prepend_token
from .preprocess import Batch, NormStats
from .traceio import MetricSchema

__all__ = [
    "VARIANTS", "CloudFormerConfig", "CloudFormerParams", "CheckpointError",
    "init_params", "forward_temporal", "forward_system", "forward",
    "schema_fingerprint", "save_checkpoint", "load_checkpoint",
]

VARIANTS = ("full", "temporal_only", "system_only")

_ATT_KEYS = ("W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_o", "b_o")


class CheckpointError(ValueError):
    """Checkpoint is malformed or does not match the requested data."""


@dataclass(frozen=True)
class CloudFormerConfig:
    """Network shape. Defaults follow the reference setup at full scale."""

    S: int
    d_t: int = 64
    d_s: int = 64
    blocks_temporal: int = 4
    blocks_system: int = 4
    heads: int = 4
    head_size: int = 16
    ffn_dim: int = 256
    dropout: float = 0.4
    variant: str = "full"
    metric_identity_embeddings: bool = True
    head_hidden: int = 64

    def __post_init__(self):
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        for name in ("d_t", "d_s", "heads", "head_size", "ffn_dim", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.blocks_temporal < 0 or self.blocks_system < 0:
            raise ValueError("block counts must be >= 0")
        if self.d_t % 2 != 0:
            raise ValueError(f"d_t must be even for the position table, got {self.d_t}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def proj_dim(self) -> int:
        return self.heads * self.head_size

    @property
    def head_in(self) -> int:
        if self.variant == "temporal_only":
            return self.d_t
        if self.variant == "system_only":
            return self.d_s
        return self.d_t + self.d_s

    @classmethod
    def tiny(cls, S: int = 6, **over) -> "CloudFormerConfig":
        """Smallest config that still exercises every code path."""
        base = dict(S=S, d_t=8, d_s=8, blocks_temporal=1, blocks_system=1,
                    heads=2, head_size=4, ffn_dim=16, dropout=0.0,
                    head_hidden=8)
        base.update(over)
        return cls(**base)

    @classmethod
    def desk(cls, S: int = 24, **over) -> "CloudFormerConfig":
        """Reduced width/depth for minutes-scale end-to-end studies."""
        base = dict(S=S, d_t=32, d_s=32, blocks_temporal=2, blocks_system=2,
                    heads=4, head_size=8, ffn_dim=64, dropout=0.1,
                    head_hidden=32)
        base.update(over)
        return cls(**base)


@dataclass
class CloudFormerParams:
    config: CloudFormerConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def group_names(self) -> set[str]:
        """Top-level parameter groups present ('temporal', 'system', 'head')."""
        return {k.split(".", 1)[0] for k in self.tensors}


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple, scale: float = 1.0) -> np.ndarray:
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_block(rng: np.random.Generator, d: int, cfg: CloudFormerConfig,
                out: dict[str, Tensor], prefix: str) -> None:
    proj = cfg.proj_dim
    for w, b in (("W_q", "b_q"), ("W_k", "b_k"), ("W_v", "b_v")):
        out[f"{prefix}.att.{w}"] = Tensor(_glorot(rng, d, proj, (d, proj)), True)
        out[f"{prefix}.att.{b}"] = Tensor(np.zeros(proj), True)
    out[f"{prefix}.att.W_o"] = Tensor(_glorot(rng, proj, d, (proj, d)), True)
    out[f"{prefix}.att.b_o"] = Tensor(np.zeros(d), True)
    out[f"{prefix}.ln1.gamma"] = Tensor(np.ones(d), True)
    out[f"{prefix}.ln1.beta"] = Tensor(np.zeros(d), True)
    out[f"{prefix}.ffn.W1"] = Tensor(_glorot(rng, d, cfg.ffn_dim, (d, cfg.ffn_dim)), True)
    out[f"{prefix}.ffn.b1"] = Tensor(np.zeros(cfg.ffn_dim), True)
    out[f"{prefix}.ffn.W2"] = Tensor(_glorot(rng, cfg.ffn_dim, d, (cfg.ffn_dim, d)), True)
    out[f"{prefix}.ffn.b2"] = Tensor(np.zeros(d), True)
    out[f"{prefix}.ln2.gamma"] = Tensor(np.ones(d), True)
    out[f"{prefix}.ln2.beta"] = Tensor(np.zeros(d), True)


def init_params(config: CloudFormerConfig, seed: int) -> CloudFormerParams:
    """Glorot-initialized parameters; the output layer starts damped so the
    untrained sigmoid stays well inside (0, 1) on standardized inputs."""
    rng = substream(seed, "model-init")
    t: dict[str, Tensor] = {}
    if config.variant in ("full", "temporal_only"):
        t["temporal.input.W"] = Tensor(_glorot(rng, config.S, config.d_t,
                                               (config.S, config.d_t)), True)
        t["temporal.input.b"] = Tensor(np.zeros(config.d_t), True)
        t["temporal.cls"] = Tensor(rng.normal(0.0, 0.02, size=config.d_t), True)
        for i in range(config.blocks_temporal):
            _init_block(rng, config.d_t, config, t, f"temporal.block{i}")
    if config.variant in ("full", "system_only"):
        t["system.proj.W"] = Tensor(_glorot(rng, 1, config.d_s, (1, config.d_s)), True)
        t["system.proj.b"] = Tensor(np.zeros(config.d_s), True)
        if config.metric_identity_embeddings:
            t["system.embed"] = Tensor(rng.normal(0.0, 0.02,
                                                  size=(config.S, config.d_s)), True)
        t["system.cls"] = Tensor(rng.normal(0.0, 0.02, size=config.d_s), True)
        for i in range(config.blocks_system):
            _init_block(rng, config.d_s, config, t, f"system.block{i}")
    h = config.head_hidden
    t["head.W1"] = Tensor(_glorot(rng, config.head_in, h, (config.head_in, h)), True)
    t["head.b1"] = Tensor(np.zeros(h), True)
    t["head.ln.gamma"] = Tensor(np.ones(h), True)
    t["head.ln.beta"] = Tensor(np.zeros(h), True)
    t["head.W2"] = Tensor(_glorot(rng, h, 1, (h, 1), scale=0.25), True)
    t["head.b2"] = Tensor(np.zeros(1), True)
    return CloudFormerParams(config=config, tensors=t)


def _encoder_block(p: dict[str, Tensor], prefix: str, h: Tensor,
                   mask: np.ndarray | None, cfg: CloudFormerConfig,
                   training: bool, rng) -> Tensor:
    att_params = {k: p[f"{prefix}.att.{k}"] for k in _ATT_KEYS}
    att = multi_head_attention(att_params, h, mask, cfg.heads)
    att = dropout(att, cfg.dropout, rng, training)
    h = layer_norm(h + att, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    ff = dense(relu(dense(h, p[f"{prefix}.ffn.W1"], p[f"{prefix}.ffn.b1"])),
               p[f"{prefix}.ffn.W2"], p[f"{prefix}.ffn.b2"])
    ff = dropout(ff, cfg.dropout, rng, training)
    return layer_norm(h + ff, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])


@lru_cache(maxsize=64)
def _pe_table(T: int, d: int) -> np.ndarray:
    pe = positional_encoding(T, d)[None, :, :]
    pe.setflags(write=False)
    return pe


def _need_rng(cfg: CloudFormerConfig, training: bool, rng):
    if training and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training with dropout > 0 requires an rng")
    return rng


def _with_cls(tokens: Tensor, cls: Tensor, B: int, d: int) -> Tensor:
    return prepend_token(tokens, cls)


def forward_temporal(batch: Batch, params: CloudFormerParams,
                     training: bool = False, rng=None) -> Tensor:
    """Class-token embedding of the per-second branch, shape (B, d_t)."""
    cfg = params.config
    rng = _need_rng(cfg, training, rng)
    B, T, S = batch.values.shape
    if T == 0:
        raise ValueError("temporal branch needs at least one timestep")
    if S != cfg.S:
        raise ValueError(f"batch has {S} metric columns, config expects {cfg.S}")
    x = Tensor(batch.values)
    tokens = relu(dense(x, params.tensors["temporal.input.W"],
                        params.tensors["temporal.input.b"]))
    h = _with_cls(tokens, params.tensors["temporal.cls"], B, cfg.d_t)
    h = h + Tensor(_pe_table(T + 1, cfg.d_t))
    mask = np.concatenate([np.ones((B, 1), dtype=bool), batch.mask], axis=1)
    for i in range(cfg.blocks_temporal):
        h = _encoder_block(params.tensors, f"temporal.block{i}", h, mask,
                           cfg, training, rng)
    return h[:, 0, :]


def forward_system(batch: Batch, params: CloudFormerParams,
                   training: bool = False, rng=None) -> Tensor:
    """Class-token embedding of the per-metric branch, shape (B, d_s)."""
    cfg = params.config
    rng = _need_rng(cfg, training, rng)
    B, T, S = batch.values.shape
    if S != cfg.S:
        raise ValueError(f"batch has {S} metric columns, config expects {cfg.S}")
    valid = batch.mask.sum(axis=1)
    if (valid == 0).any():
        raise ValueError("system branch needs at least one valid second per sample")
    # masked time-mean: padded seconds carry exact zeros, so plain sums work
    pooled = (batch.values * batch.mask[:, :, None]).sum(axis=1) / valid[:, None]
    tokens = dense(Tensor(pooled[:, :, None]), params.tensors["system.proj.W"],
                   params.tensors["system.proj.b"])
    if cfg.metric_identity_embeddings:
        tokens = tokens + params.tensors["system.embed"]
    h = _with_cls(tokens, params.tensors["system.cls"], B, cfg.d_s)
    for i in range(cfg.blocks_system):
        h = _encoder_block(params.tensors, f"system.block{i}", h, None,
                           cfg, training, rng)
    return h[:, 0, :]


def forward(batch: Batch, params: CloudFormerParams, config: CloudFormerConfig,
            training: bool = False, rng=None) -> Tensor:
    """Predicted retention per sample, shape (B, 1), strictly inside (0, 1)."""
    if config != params.config:
        raise ValueError("config does not match the one the parameters were built for")
    rng = _need_rng(config, training, rng)
    if config.variant == "temporal_only":
        emb = forward_temporal(batch, params, training, rng)
    elif config.variant == "system_only":
        emb = forward_system(batch, params, training, rng)
    else:
        emb = concat([forward_temporal(batch, params, training, rng),
                      forward_system(batch, params, training, rng)], axis=1)
    p = params.tensors
    z = swish(dense(emb, p["head.W1"], p["head.b1"]))
    z = layer_norm(z, p["head.ln.gamma"], p["head.ln.beta"])
    z = dropout(z, config.dropout, rng, training)
    return sigmoid(dense(z, p["head.W2"], p["head.b2"]))


# checkpoints ---------------------------------------------------------------

def schema_fingerprint(schema: MetricSchema) -> str:
    h = hashlib.sha256()
    for name in schema.column_names:
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def save_checkpoint(path: Path, params: CloudFormerParams, stats: NormStats,
                    schema: MetricSchema) -> None:
    """Single-file .npz: parameters, normalization stats, config, schema hash."""
    path = Path(path)
    arrays = {f"param/{k}": np.ascontiguousarray(v.data)
              for k, v in params.tensors.items()}
    arrays["norm/mean"] = stats.mean
    arrays["norm/std"] = stats.std
    meta = {
        "format": 1,
        "config": asdict(params.config),
        "schema_sha256": schema_fingerprint(schema),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path: Path, schema: MetricSchema | None = None):
    """Returns (params, stats, meta). With a schema given, refuses to load a
    checkpoint fitted against differently named or ordered metrics."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z:
            raise CheckpointError(f"{path} is not a model checkpoint")
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != 1:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
        if schema is not None:
            want = schema_fingerprint(schema)
            if meta["schema_sha256"] != want:
                raise CheckpointError(
                    "checkpoint was trained on a different metric schema "
                    f"({meta['schema_sha256'][:12]} != {want[:12]})")
        config = CloudFormerConfig(**meta["config"])
        tensors = {k[len("param/"):]: Tensor(z[k], requires_grad=True)
                   for k in z.files if k.startswith("param/")}
        stats = NormStats(mean=z["norm/mean"], std=z["norm/std"])
    params = CloudFormerParams(config=config, tensors=tensors)
    expect = set(init_params(config, 0).tensors)
    if set(tensors) != expect:
        missing = expect - set(tensors)
        extra = set(tensors) - expect
        raise CheckpointError(f"parameter set mismatch (missing={sorted(missing)}, "
                              f"extra={sorted(extra)})")
    return params, stats, meta
