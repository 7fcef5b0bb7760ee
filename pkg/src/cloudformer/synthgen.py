"""Synthetic labeled trace datasets with a known closed-form degradation.

The generator reproduces the four workload shapes (plus both monotonic
directions) and an interference model whose label has an exact closed form,
so end-to-end tests have ground truth:

    P = clamp( 1 / (1 + alpha*c + beta*c*l + gamma*c^2), 0+, 1 )

where l is the run's mean workload level and c the mean contention from
neighbor VMs. The quadratic term is deliberately nonlinear in the trace
features so linear baselines cannot be Bayes-optimal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._rng import substream
from .traceio import (
    MIXED,
    PM_KINDS,
    SCENARIOS,
    STATIC_ONLY,
    HIGHER_IS_BETTER,
    MetricSchema,
    PerfMetricKind,
    RunRecord,
    TraceDataset,
    compute_label,
)


class ConfigError(ValueError):
    """Invalid generator configuration."""


@dataclass(frozen=True)
class WorkloadProfile:
    """Client-load shape driving one run; levels are always within [0, 1]."""

    kind: str
    base_level: float
    amplitude: float = 0.0
    period_s: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown workload kind {self.kind!r}")
        if not 0.0 <= self.base_level <= 1.0:
            raise ConfigError(f"base_level {self.base_level} outside [0, 1]")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ConfigError(f"amplitude {self.amplitude} outside [0, 1]")
        if self.kind in ("monotonic_up", "periodic") and self.base_level + self.amplitude > 1.0:
            raise ConfigError("base_level + amplitude exceeds 1")
        if self.kind == "monotonic_down" and self.base_level - self.amplitude < 0.0:
            raise ConfigError("base_level - amplitude below 0")
        if self.kind == "periodic" and (self.period_s is None or self.period_s < 1):
            raise ConfigError("periodic workload needs a positive period_s")


@dataclass(frozen=True)
class InterferenceConfig:
    """Contention model: up to 8 interfering VMs on the same socket."""

    n_neighbors: int = 4
    alpha: float = 0.8
    beta: float = 0.6
    gamma: float = 0.9
    noise_sigma: float = 0.05

    def __post_init__(self):
        if not 0 <= self.n_neighbors <= 8:
            raise ConfigError(f"n_neighbors {self.n_neighbors} outside [0, 8]")
        for name in ("alpha", "beta", "gamma", "noise_sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class GroundTruthLabeler:
    """Closed-form degradation from mean contention and mean load."""

    alpha: float
    beta: float
    gamma: float

    def label(self, c_mean: float, l_mean: float) -> float:
        denom = 1.0 + self.alpha * c_mean + self.beta * c_mean * l_mean + self.gamma * c_mean**2
        return float(min(1.0, max(np.nextafter(0.0, 1.0), 1.0 / denom)))


def gen_workload(profile: WorkloadProfile, T: int) -> np.ndarray:
    """Level series of length T for the given profile; deterministic per seed."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    base, amp = profile.base_level, profile.amplitude
    if profile.kind == "static":
        return np.full(T, base)
    if profile.kind == "monotonic_up":
        return np.linspace(base, base + amp, T)
    if profile.kind == "monotonic_down":
        return np.linspace(base, base - amp, T)
    if profile.kind == "periodic":
        p = profile.period_s
        if p > T:
            raise ConfigError(f"period_s {p} exceeds T {T}")
        # phase index is computed modulo p so periodicity is exact in floats
        phase = np.arange(T) % p
        return base + amp * 0.5 * (1.0 + np.sin(2.0 * np.pi * phase / p))
    # random: seeded bounded walk clipped to [0, 1]
    rng = substream(profile.seed, "workload_walk")
    steps = rng.normal(0.0, amp / 4.0 if amp > 0 else 0.05, size=T)
    level = np.empty(T)
    level[0] = base
    for t in range(1, T):
        level[t] = min(1.0, max(0.0, level[t - 1] + steps[t]))
    return level


@dataclass(frozen=True)
class AppSpec:
    """Per-application generative parameters.

    Each base metric responds affinely to the load level (primary block) or
    to the contention level (neighbor block); distinct response vectors make
    applications distinguishable. Slopes are bounded away from zero so the
    latent series can be recovered from a noise-free trace.
    """

    app_id: str
    pm_kind: PerfMetricKind
    pm_ideal: float
    a_primary: np.ndarray
    b_primary: np.ndarray
    a_neighbor: np.ndarray
    b_neighbor: np.ndarray


def make_app_spec(app_index: int, schema: MetricSchema, seed: int) -> AppSpec:
    rng = substream(seed, "app_spec", app_index)
    n = schema.n_base
    kind_names = sorted(PM_KINDS)
    kind = PM_KINDS[kind_names[app_index % len(kind_names)]]

    # Response direction is a property of the metric, not the app: a counter
    # that rises under load for one app rises for all of them. Only the
    # offset and gain magnitude vary per app, so unseen apps stay inside the
    # support of the training distribution.
    dir_rng = substream(seed, "metric_dir")
    sign_p = dir_rng.choice([-1.0, 1.0], size=n)
    sign_n = dir_rng.choice([-1.0, 1.0], size=n)

    def affine_pair(sign):
        a = rng.uniform(-0.3, 0.3, size=n)
        b = rng.uniform(0.7, 1.3, size=n) * sign
        return a, b

    a_p, b_p = affine_pair(sign_p)
    a_n, b_n = affine_pair(sign_n)
    return AppSpec(
        app_id=f"app{app_index:02d}",
        pm_kind=kind,
        pm_ideal=float(rng.uniform(50.0, 500.0)),
        a_primary=a_p,
        b_primary=b_p,
        a_neighbor=a_n,
        b_neighbor=b_n,
    )


def _neighbor_profile(rng: np.random.Generator, T: int, seed: int) -> WorkloadProfile:
    kind = str(rng.choice(SCENARIOS))
    if kind == "static":
        return WorkloadProfile(kind, base_level=float(rng.uniform(0.1, 0.9)), seed=seed)
    if kind == "monotonic_up":
        base = float(rng.uniform(0.05, 0.4))
        return WorkloadProfile(kind, base, amplitude=float(rng.uniform(0.1, 0.95 - base)), seed=seed)
    if kind == "monotonic_down":
        base = float(rng.uniform(0.5, 0.95))
        return WorkloadProfile(kind, base, amplitude=float(rng.uniform(0.1, base - 0.05)), seed=seed)
    if kind == "periodic":
        base = float(rng.uniform(0.05, 0.4))
        period = int(rng.choice([4, 8, 16]))
        return WorkloadProfile(kind, base, amplitude=float(rng.uniform(0.1, 0.95 - base)),
                               period_s=min(period, T), seed=seed)
    return WorkloadProfile("random", base_level=float(rng.uniform(0.2, 0.8)),
                           amplitude=float(rng.uniform(0.1, 0.5)), seed=seed)


def contention_series(interference: InterferenceConfig, T: int, seed: int) -> np.ndarray:
    """Mean load of the interfering VMs, one value per second; zeros if none."""
    if interference.n_neighbors == 0:
        return np.zeros(T)
    levels = []
    for k in range(interference.n_neighbors):
        rng = substream(seed, "neighbor", k)
        prof = _neighbor_profile(rng, T, seed=int(rng.integers(2**31)))
        levels.append(gen_workload(prof, T))
    return np.mean(np.stack(levels), axis=0)


def gen_trace(
    workload: np.ndarray,
    interference: InterferenceConfig,
    schema: MetricSchema,
    seed: int,
    *,
    app: AppSpec,
    scenario: str = "static",
) -> RunRecord:
    """One labeled run: affine metric responses plus Gaussian noise."""
    level = np.asarray(workload, dtype=np.float64)
    T = level.shape[0]
    contention = contention_series(interference, T, seed)

    primary = app.a_primary[:, None] + app.b_primary[:, None] * level[None, :]
    if interference.n_neighbors > 0:
        neighbor = app.a_neighbor[:, None] + app.b_neighbor[:, None] * contention[None, :]
    else:
        neighbor = np.zeros_like(primary)
    if interference.noise_sigma > 0:
        noise_rng = substream(seed, "noise")
        primary = primary + noise_rng.normal(0.0, interference.noise_sigma, size=primary.shape)
        if interference.n_neighbors > 0:
            neighbor = neighbor + noise_rng.normal(0.0, interference.noise_sigma, size=neighbor.shape)
    matrix = np.concatenate([primary, neighbor], axis=0)

    labeler = GroundTruthLabeler(interference.alpha, interference.beta, interference.gamma)
    P = labeler.label(float(np.mean(contention)), float(np.mean(level)))
    if app.pm_kind.direction == HIGHER_IS_BETTER:
        pm_actual = app.pm_ideal * P
    else:
        pm_actual = app.pm_ideal / P
    return RunRecord(
        app_id=app.app_id,
        scenario=scenario,
        matrix=matrix,
        duration_T=T,
        pm_kind=app.pm_kind,
        pm_ideal=app.pm_ideal,
        pm_actual=pm_actual,
        label_P=compute_label(app.pm_ideal, pm_actual, app.pm_kind),
    )


def recover_label(record: RunRecord, app: AppSpec, labeler: GroundTruthLabeler) -> float:
    """Brute-force label recomputation by inverting the affine responses.

    Exact (to float precision) on noise-free traces; used as the independent
    oracle in tests.
    """
    n = app.a_primary.shape[0]
    primary = record.matrix[:n, :]
    neighbor = record.matrix[n:, :]
    level = (primary - app.a_primary[:, None]) / app.b_primary[:, None]
    l_mean = float(np.mean(level))
    if np.all(neighbor == 0.0):
        c_mean = 0.0
    else:
        contention = (neighbor - app.a_neighbor[:, None]) / app.b_neighbor[:, None]
        c_mean = float(np.mean(contention))
    return labeler.label(c_mean, l_mean)


# Scenario rotation for mixed apps; starts with a dynamic shape so every
# mixed app has at least one dynamic run regardless of runs_per_app.
MIXED_CYCLE = ("monotonic_up", "periodic", "random", "monotonic_down", "static")


def _run_profile(scenario: str, rng: np.random.Generator, T: int, seed: int) -> WorkloadProfile:
    if scenario == "static":
        return WorkloadProfile("static", base_level=float(rng.uniform(0.2, 0.9)), seed=seed)
    if scenario == "monotonic_up":
        base = float(rng.uniform(0.1, 0.4))
        return WorkloadProfile(scenario, base, amplitude=float(rng.uniform(0.2, 0.9 - base)), seed=seed)
    if scenario == "monotonic_down":
        base = float(rng.uniform(0.6, 0.9))
        return WorkloadProfile(scenario, base, amplitude=float(rng.uniform(0.2, base - 0.1)), seed=seed)
    if scenario == "periodic":
        base = float(rng.uniform(0.1, 0.4))
        period = int(rng.choice([4, 8, 16]))
        return WorkloadProfile(scenario, base, amplitude=float(rng.uniform(0.2, 0.9 - base)),
                               period_s=min(period, T), seed=seed)
    return WorkloadProfile("random", base_level=float(rng.uniform(0.3, 0.7)),
                           amplitude=float(rng.uniform(0.1, 0.5)), seed=seed)


def gen_dataset(
    n_apps: int,
    runs_per_app: int,
    static_only_fraction: float,
    T_range: tuple[int, int],
    seed: int,
    *,
    schema: MetricSchema | None = None,
    interference: InterferenceConfig | None = None,
) -> TraceDataset:
    """Labeled dataset with the requested app composition; deterministic per seed."""
    if n_apps < 1:
        raise ConfigError("n_apps must be >= 1")
    t_min, t_max = T_range
    if not 1 <= t_min <= t_max:
        raise ConfigError(f"bad T_range {T_range}")
    if schema is None:
        schema = MetricSchema.default()
    base_cfg = interference if interference is not None else InterferenceConfig()

    if runs_per_app == 0:
        warnings.warn("runs_per_app=0: emitting an empty dataset", stacklevel=2)
        return TraceDataset(runs=[], schema=schema, apps={})

    n_static_only = min(n_apps, max(0, round(n_apps * static_only_fraction)))
    runs: list[RunRecord] = []
    apps: dict[str, str] = {}
    for i in range(n_apps):
        app = make_app_spec(i, schema, seed)
        static_only = i < n_static_only
        apps[app.app_id] = STATIC_ONLY if static_only else MIXED
        for j in range(runs_per_app):
            scenario = "static" if static_only else MIXED_CYCLE[j % len(MIXED_CYCLE)]
            run_rng = substream(seed, "run", i, j)
            T = int(run_rng.integers(t_min, t_max + 1))
            run_seed = int(run_rng.integers(2**63))
            profile = _run_profile(scenario, run_rng, T, seed=run_seed)
            cfg = InterferenceConfig(
                n_neighbors=int(run_rng.integers(0, 9)),
                alpha=base_cfg.alpha,
                beta=base_cfg.beta,
                gamma=base_cfg.gamma,
                noise_sigma=base_cfg.noise_sigma,
            )
            runs.append(gen_trace(gen_workload(profile, T), cfg, schema, run_seed,
                                  app=app, scenario=scenario))
    dataset = TraceDataset(runs=runs, schema=schema, apps=apps)
    dataset.validate()
    return dataset
