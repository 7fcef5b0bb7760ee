"""Trace data model, on-disk format, label computation and neighbor aggregation.

A run is one execution of an application inside its own VM. Its trace is a
matrix with one row per metric and one column per second. The base schema
holds per-VM metrics; the full schema doubles it with neighbor-averaged
columns, yielding 206 columns for the default 103-metric schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TraceError(ValueError):
    """Base class for trace data errors."""


class SchemaError(TraceError):
    """Schema definition or schema/file mismatch."""


class ParseError(TraceError):
    """Malformed on-disk run data."""


class ConsistencyError(TraceError):
    """Stored values violate a dataset invariant."""


SCENARIOS = ("static", "monotonic_up", "monotonic_down", "periodic", "random")
DYNAMIC_SCENARIOS = ("monotonic_up", "monotonic_down", "periodic", "random")

HIGHER_IS_BETTER = "higher_is_better"
LOWER_IS_BETTER = "lower_is_better"

# --- base metric names -------------------------------------------------------
# 53 VM-level stats (hypervisor view), 38 hardware counters, 12 top-down
# bottleneck metrics. Order is fixed; files must serialize columns in this
# order.

_VM_STATS = (
    "vm_cpu_time", "vm_cpu_user", "vm_cpu_system", "vm_cpu_steal",
    "vm_vcpu0_time", "vm_vcpu0_wait", "vm_vcpu1_time", "vm_vcpu1_wait",
    "vm_vcpu2_time", "vm_vcpu2_wait", "vm_vcpu3_time", "vm_vcpu3_wait",
    "vm_mem_available_kb", "vm_mem_unused_kb", "vm_mem_usable_kb",
    "vm_mem_rss_kb", "vm_mem_swap_in", "vm_mem_swap_out",
    "vm_mem_major_fault", "vm_mem_minor_fault", "vm_mem_disk_cache_kb",
    "vm_blk_rd_reqs", "vm_blk_rd_bytes", "vm_blk_rd_time",
    "vm_blk_wr_reqs", "vm_blk_wr_bytes", "vm_blk_wr_time",
    "vm_blk_flush_reqs", "vm_blk_flush_time", "vm_blk_allocation",
    "vm_blk_capacity", "vm_blk_physical",
    "vm_net_rx_bytes", "vm_net_rx_pkts", "vm_net_rx_errs", "vm_net_rx_drop",
    "vm_net_tx_bytes", "vm_net_tx_pkts", "vm_net_tx_errs", "vm_net_tx_drop",
    "vm_host_cpu_pct", "vm_host_mem_pct", "vm_host_rss_kb", "vm_host_vsz_kb",
    "vm_host_shared_kb", "vm_host_threads", "vm_host_minor_faults",
    "vm_host_major_faults", "vm_host_vol_ctxt_switches",
    "vm_host_invol_ctxt_switches", "vm_host_iowait_pct", "vm_host_steal_pct",
    "vm_host_idle_pct",
)

_HW_COUNTERS = (
    "hw_cycles", "hw_instructions", "hw_branch_instructions",
    "hw_branch_misses", "hw_cache_references", "hw_cache_misses",
    "hw_bus_cycles", "hw_ref_cycles", "hw_stalled_cycles_frontend",
    "hw_stalled_cycles_backend",
    "hw_l1d_loads", "hw_l1d_load_misses", "hw_l1d_stores",
    "hw_l1d_store_misses",
    "hw_l1i_loads", "hw_l1i_load_misses",
    "hw_llc_loads", "hw_llc_load_misses", "hw_llc_stores",
    "hw_llc_store_misses",
    "hw_dtlb_loads", "hw_dtlb_load_misses", "hw_dtlb_stores",
    "hw_dtlb_store_misses",
    "hw_itlb_loads", "hw_itlb_load_misses",
    "hw_node_loads", "hw_node_load_misses", "hw_node_stores",
    "hw_node_store_misses",
    "hw_page_faults", "hw_context_switches", "hw_cpu_migrations",
    "hw_minor_faults", "hw_major_faults", "hw_alignment_faults",
    "hw_emulation_faults", "hw_task_clock",
)

_TOPDOWN = (
    "td_retiring", "td_bad_speculation", "td_frontend_bound",
    "td_backend_bound", "td_fetch_latency", "td_fetch_bandwidth",
    "td_branch_mispredicts", "td_machine_clears", "td_core_bound",
    "td_memory_bound", "td_light_operations", "td_heavy_operations",
)

CATEGORY_VM_STATS = "vm_stats"
CATEGORY_HW_COUNTERS = "hw_counters"
CATEGORY_TOPDOWN = "topdown"
CATEGORIES = (CATEGORY_VM_STATS, CATEGORY_HW_COUNTERS, CATEGORY_TOPDOWN)

DEFAULT_CATEGORY_COUNTS = {
    CATEGORY_VM_STATS: 53,
    CATEGORY_HW_COUNTERS: 38,
    CATEGORY_TOPDOWN: 12,
}

NEIGHBOR_SUFFIX = "__nbr_mean"


@dataclass(frozen=True)
class PerfMetricKind:
    """A performance metric name plus the direction in which bigger is better."""

    name: str
    direction: str

    def __post_init__(self):
        if self.direction not in (HIGHER_IS_BETTER, LOWER_IS_BETTER):
            raise ValueError(f"unknown direction {self.direction!r}")


# Performance metric kinds used across the 11 applications. Throughput-like
# metrics improve upward, time-like metrics improve downward.
PM_KINDS = {
    "operations_per_s": PerfMetricKind("operations_per_s", HIGHER_IS_BETTER),
    "requests_per_s": PerfMetricKind("requests_per_s", HIGHER_IS_BETTER),
    "throughput": PerfMetricKind("throughput", HIGHER_IS_BETTER),
    "operations_per_ms": PerfMetricKind("operations_per_ms", HIGHER_IS_BETTER),
    "execution_time_s": PerfMetricKind("execution_time_s", LOWER_IS_BETTER),
    "latency_s": PerfMetricKind("latency_s", LOWER_IS_BETTER),
    "latency_ms": PerfMetricKind("latency_ms", LOWER_IS_BETTER),
}


@dataclass(frozen=True)
class MetricSchema:
    """Ordered base metric names plus per-metric category tags.

    The full (serialized) schema appends one neighbor-averaged column per
    base metric, so a trace always has ``2 * n_base`` metric rows.
    """

    names: tuple[str, ...]
    categories: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.categories):
            raise SchemaError("names and categories must align")
        if len(self.names) == 0:
            raise SchemaError("schema must contain at least one metric")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("metric names must be unique")
        for cat in self.categories:
            if cat not in CATEGORIES:
                raise SchemaError(f"unknown category {cat!r}")

    @property
    def n_base(self) -> int:
        return len(self.names)

    @property
    def n_cols(self) -> int:
        return 2 * self.n_base

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.names + tuple(n + NEIGHBOR_SUFFIX for n in self.names)

    def category_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CATEGORIES}
        for cat in self.categories:
            counts[cat] += 1
        return counts

    @classmethod
    def default(cls) -> "MetricSchema":
        """The full 103-metric schema (53 VM stats, 38 counters, 12 top-down)."""
        names = _VM_STATS + _HW_COUNTERS + _TOPDOWN
        cats = (
            (CATEGORY_VM_STATS,) * len(_VM_STATS)
            + (CATEGORY_HW_COUNTERS,) * len(_HW_COUNTERS)
            + (CATEGORY_TOPDOWN,) * len(_TOPDOWN)
        )
        schema = cls(names, cats)
        assert schema.category_counts() == DEFAULT_CATEGORY_COUNTS
        assert schema.n_cols == 206
        return schema

    @classmethod
    def desk(cls, n_base: int = 12) -> "MetricSchema":
        """Shrunk schema for fast tests; category mix stays roughly proportional."""
        if not 3 <= n_base <= 103:
            raise SchemaError("desk schema needs 3..103 base metrics")
        n_vm = max(1, round(n_base * 53 / 103))
        n_hw = max(1, round(n_base * 38 / 103))
        n_td = n_base - n_vm - n_hw
        if n_td < 1:
            n_td = 1
            n_hw = n_base - n_vm - n_td
        names = _VM_STATS[:n_vm] + _HW_COUNTERS[:n_hw] + _TOPDOWN[:n_td]
        cats = (
            (CATEGORY_VM_STATS,) * n_vm
            + (CATEGORY_HW_COUNTERS,) * n_hw
            + (CATEGORY_TOPDOWN,) * n_td
        )
        return cls(names, cats)


@dataclass
class RunRecord:
    """One execution trace with its degradation label.

    `matrix` has `schema.n_cols` rows (base metrics then neighbor means) and
    one column per second. `label_P` is in (0, 1]; 1 means no degradation.
    """

    app_id: str
    scenario: str
    matrix: np.ndarray
    duration_T: int
    pm_kind: PerfMetricKind
    pm_ideal: float
    pm_actual: float
    label_P: float

    def validate(self, schema: MetricSchema) -> None:
        if self.scenario not in SCENARIOS:
            raise ConsistencyError(f"unknown scenario {self.scenario!r}")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != schema.n_cols:
            raise ConsistencyError(
                f"expected {schema.n_cols} metric rows, got {self.matrix.shape}"
            )
        if self.duration_T < 1 or self.matrix.shape[1] != self.duration_T:
            raise ConsistencyError(
                f"duration_T={self.duration_T} does not match matrix with "
                f"{self.matrix.shape[1]} columns"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise ConsistencyError("matrix contains non-finite values")
        if not 0.0 < self.label_P <= 1.0:
            raise ConsistencyError(f"label_P={self.label_P} outside (0, 1]")
        expect = compute_label(self.pm_ideal, self.pm_actual, self.pm_kind)
        if abs(expect - self.label_P) > 1e-12:
            raise ConsistencyError(
                f"stored label_P={self.label_P} but pm fields imply {expect}"
            )


STATIC_ONLY = "static_only"
MIXED = "mixed"


@dataclass
class TraceDataset:
    """A set of runs plus the schema and the per-app scenario classification."""

    runs: list[RunRecord]
    schema: MetricSchema
    apps: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        by_app: dict[str, list[RunRecord]] = {}
        for run in self.runs:
            run.validate(self.schema)
            if run.app_id not in self.apps:
                raise ConsistencyError(f"run app_id {run.app_id!r} missing from apps map")
            by_app.setdefault(run.app_id, []).append(run)
        for app_id, kind in self.apps.items():
            scen = {r.scenario for r in by_app.get(app_id, [])}
            if kind == STATIC_ONLY and scen - {"static"}:
                raise ConsistencyError(f"static_only app {app_id!r} has dynamic runs")
            if kind == MIXED and not (scen & set(DYNAMIC_SCENARIOS)):
                raise ConsistencyError(f"mixed app {app_id!r} has no dynamic run")
            if kind not in (STATIC_ONLY, MIXED):
                raise ConsistencyError(f"unknown app kind {kind!r}")

    def app_ids(self, kind: str | None = None) -> list[str]:
        ids = sorted(self.apps)
        if kind is None:
            return ids
        return [a for a in ids if self.apps[a] == kind]

    def runs_for(self, app_ids) -> list[RunRecord]:
        wanted = set(app_ids)
        return [r for r in self.runs if r.app_id in wanted]


def compute_label(pm_ideal: float, pm_actual: float, kind: PerfMetricKind) -> float:
    """Degradation label in (0, 1].

    The ratio is oriented by the metric's direction so that 1 always means
    "no degradation": ideal/actual for time-like metrics, actual/ideal for
    throughput-like ones. Measurement noise can push the raw ratio above 1;
    it is clamped.
    """
    if not pm_ideal > 0:
        raise ValueError(f"pm_ideal must be positive, got {pm_ideal}")
    if not pm_actual > 0:
        raise ValueError(f"pm_actual must be positive, got {pm_actual}")
    if kind.direction == LOWER_IS_BETTER:
        ratio = pm_ideal / pm_actual
    else:
        ratio = pm_actual / pm_ideal
    return min(1.0, ratio)


def aggregate_neighbors(primary: np.ndarray, neighbors: list[np.ndarray]) -> np.ndarray:
    """Stack the primary block on top of the element-wise neighbor mean.

    With no neighbors the second block is all zeros, which after z-scoring
    reads as "no neighbor pressure".
    """
    primary = np.asarray(primary, dtype=np.float64)
    if primary.ndim != 2:
        raise SchemaError("primary matrix must be 2-D")
    for i, nb in enumerate(neighbors):
        if np.shape(nb) != primary.shape:
            raise SchemaError(
                f"neighbor {i} shape {np.shape(nb)} does not match primary {primary.shape}"
            )
    if neighbors:
        nbr = np.mean(np.stack([np.asarray(n, dtype=np.float64) for n in neighbors]), axis=0)
    else:
        nbr = np.zeros_like(primary)
    return np.concatenate([primary, nbr], axis=0)


# --- on-disk format ----------------------------------------------------------
# dataset/schema.csv                      index,name,category (base metrics)
# dataset/runs/<app_id>/<run_id>/meta.json
# dataset/runs/<app_id>/<run_id>/trace.csv  header = full column names,
#                                           one data row per second
# Reals are serialized as full-precision decimal text (shortest round-trip).


def _fmt(x: float) -> str:
    return repr(float(x))


def write_schema(schema: MetricSchema, path: Path) -> None:
    lines = ["index,name,category"]
    for i, (name, cat) in enumerate(zip(schema.names, schema.categories)):
        lines.append(f"{i},{name},{cat}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_schema(path: Path) -> MetricSchema:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "index,name,category":
        raise ParseError(f"{path}: bad schema header")
    names, cats = [], []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"{path}:{ln}: expected 3 columns")
        idx, name, cat = parts
        if int(idx) != ln - 2:
            raise ParseError(f"{path}:{ln}: index {idx} out of order")
        names.append(name)
        cats.append(cat)
    schema = MetricSchema(tuple(names), tuple(cats))
    if schema.n_base == 103 and schema.category_counts() != DEFAULT_CATEGORY_COUNTS:
        raise SchemaError(f"{path}: 103-metric schema must split 53/38/12")
    return schema


def write_run(record: RunRecord, run_dir: Path, schema: MetricSchema) -> None:
    record.validate(schema)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "app_id": record.app_id,
        "scenario": record.scenario,
        "pm_kind": record.pm_kind.name,
        "direction": record.pm_kind.direction,
        "pm_ideal": record.pm_ideal,
        "pm_actual": record.pm_actual,
        "label_P": record.label_P,
        "duration_T": record.duration_T,
    }
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    rows = [",".join(schema.column_names)]
    for t in range(record.duration_T):
        rows.append(",".join(_fmt(v) for v in record.matrix[:, t]))
    (run_dir / "trace.csv").write_text("\n".join(rows) + "\n")


def read_run(run_dir: Path, schema: MetricSchema) -> RunRecord:
    run_dir = Path(run_dir)
    meta_path = run_dir / "meta.json"
    trace_path = run_dir / "trace.csv"
    if not meta_path.exists():
        raise ParseError(f"{run_dir}: missing meta.json")
    if not trace_path.exists():
        raise ParseError(f"{run_dir}: missing trace.csv")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("app_id", "scenario", "pm_kind", "direction", "pm_ideal",
                "pm_actual", "label_P", "duration_T"):
        if key not in meta:
            raise ParseError(f"{meta_path}: missing key {key!r}")
    kind = PM_KINDS.get(meta["pm_kind"])
    if kind is None:
        kind = PerfMetricKind(meta["pm_kind"], meta["direction"])
    elif kind.direction != meta["direction"]:
        raise ConsistencyError(
            f"{meta_path}: direction {meta['direction']!r} contradicts kind "
            f"{meta['pm_kind']!r}"
        )

    lines = trace_path.read_text().splitlines()
    if not lines:
        raise ParseError(f"{trace_path}: empty file")
    header = tuple(lines[0].split(","))
    if header != schema.column_names:
        if len(header) != schema.n_cols:
            raise ParseError(
                f"{trace_path}: expected {schema.n_cols} metric columns, "
                f"got {len(header)}"
            )
        raise ParseError(f"{trace_path}: header does not match schema order")
    T = int(meta["duration_T"])
    if len(lines) - 1 != T:
        raise ParseError(
            f"{trace_path}: expected {T} data rows, got {len(lines) - 1}"
        )
    matrix = np.empty((schema.n_cols, T), dtype=np.float64)
    for t, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != schema.n_cols:
            raise ParseError(
                f"{trace_path}: row {t + 1}: expected {schema.n_cols} cells, "
                f"got {len(cells)}"
            )
        for j, cell in enumerate(cells):
            try:
                matrix[j, t] = float(cell)
            except ValueError as exc:
                raise ParseError(
                    f"{trace_path}: row {t + 1}, column {schema.column_names[j]!r}: "
                    f"non-numeric cell {cell!r}"
                ) from exc
    record = RunRecord(
        app_id=meta["app_id"],
        scenario=meta["scenario"],
        matrix=matrix,
        duration_T=T,
        pm_kind=kind,
        pm_ideal=float(meta["pm_ideal"]),
        pm_actual=float(meta["pm_actual"]),
        label_P=float(meta["label_P"]),
    )
    record.validate(schema)
    return record


def write_dataset(dataset: TraceDataset, root: Path) -> None:
    dataset.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_schema(dataset.schema, root / "schema.csv")
    counters: dict[str, int] = {}
    for run in dataset.runs:
        idx = counters.get(run.app_id, 0)
        counters[run.app_id] = idx + 1
        write_run(run, root / "runs" / run.app_id / f"run_{idx:03d}", dataset.schema)


def read_dataset(root: Path) -> TraceDataset:
    """Read a dataset directory; app classification is derived from the runs."""
    root = Path(root)
    schema = read_schema(root / "schema.csv")
    runs_dir = root / "runs"
    if not runs_dir.is_dir():
        raise ParseError(f"{root}: missing runs/ directory")
    runs: list[RunRecord] = []
    apps: dict[str, str] = {}
    for app_dir in sorted(runs_dir.iterdir()):
        if not app_dir.is_dir():
            continue
        app_runs = []
        for run_dir in sorted(app_dir.iterdir()):
            if not run_dir.is_dir():
                continue
            rec = read_run(run_dir, schema)
            if rec.app_id != app_dir.name:
                raise ConsistencyError(
                    f"{run_dir}: meta app_id {rec.app_id!r} does not match "
                    f"directory {app_dir.name!r}"
                )
            app_runs.append(rec)
        if not app_runs:
            continue
        dynamic = any(r.scenario != "static" for r in app_runs)
        apps[app_dir.name] = MIXED if dynamic else STATIC_ONLY
        runs.extend(app_runs)
    dataset = TraceDataset(runs=runs, schema=schema, apps=apps)
    dataset.validate()
    return dataset


def validate_dataset_dir(root: Path) -> list[str]:
    """Check a dataset directory against every invariant; returns violations.

    Used by the CLI `validate` command. Collects as many violations as it
    can instead of stopping at the first.
    """
    root = Path(root)
    violations: list[str] = []
    try:
        schema = read_schema(root / "schema.csv")
    except (TraceError, OSError, ValueError) as exc:
        return [f"schema.csv: {exc}"]
    runs_dir = root / "runs"
    if not runs_dir.is_dir():
        return violations + ["missing runs/ directory"]
    for app_dir in sorted(runs_dir.iterdir()):
        if not app_dir.is_dir():
            continue
        scenarios = set()
        for run_dir in sorted(app_dir.iterdir()):
            if not run_dir.is_dir():
                continue
            try:
                rec = read_run(run_dir, schema)
                scenarios.add(rec.scenario)
                if rec.app_id != app_dir.name:
                    violations.append(
                        f"{run_dir}: app_id {rec.app_id!r} != directory name"
                    )
            except TraceError as exc:
                violations.append(str(exc))
        if not scenarios:
            violations.append(f"{app_dir}: app directory contains no runs")
    return violations
