import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudformer.traceio import (
    HIGHER_IS_BETTER,
    LOWER_IS_BETTER,
    MIXED,
    PM_KINDS,
    STATIC_ONLY,
    ConsistencyError,
    MetricSchema,
    PerfMetricKind,
    RunRecord,
    SchemaError,
    TraceDataset,
    aggregate_neighbors,
    compute_label,
    read_dataset,
    read_run,
    read_schema,
    validate_dataset_dir,
    write_dataset,
    write_run,
    write_schema,
)

from helpers import small_dataset

THROUGHPUT = PM_KINDS["throughput"]
LATENCY = PM_KINDS["latency_s"]


# schema ------------------------------------------------------------------

def test_default_schema_shape():
    schema = MetricSchema.default()
    assert schema.n_base == 103
    assert schema.n_cols == 206
    assert schema.category_counts() == {
        "vm_stats": 53, "hw_counters": 38, "topdown": 12}
    assert len(schema.column_names) == 206
    assert schema.column_names[103] == schema.names[0] + "__nbr_mean"


def test_desk_schema_counts():
    schema = MetricSchema.desk(n_base=12)
    assert schema.n_cols == 24
    counts = schema.category_counts()
    assert sum(counts.values()) == 12
    assert all(v >= 1 for v in counts.values())


@pytest.mark.parametrize("n_base", [2, 104])
def test_desk_schema_bounds(n_base):
    with pytest.raises(SchemaError):
        MetricSchema.desk(n_base=n_base)


def test_schema_rejects_duplicates():
    with pytest.raises(SchemaError):
        MetricSchema(("a", "a"), ("vm_stats", "vm_stats"))
    with pytest.raises(SchemaError):
        MetricSchema(("a",), ("no_such_category",))
    with pytest.raises(SchemaError):
        MetricSchema((), ())


def test_schema_roundtrip(tmp_path):
    schema = MetricSchema.desk(n_base=5)
    write_schema(schema, tmp_path / "schema.csv")
    assert read_schema(tmp_path / "schema.csv") == schema


# labels ------------------------------------------------------------------

def test_perf_metric_kinds():
    assert len(PM_KINDS) == 7
    directions = {k.direction for k in PM_KINDS.values()}
    assert directions == {HIGHER_IS_BETTER, LOWER_IS_BETTER}
    with pytest.raises(ValueError):
        PerfMetricKind("x", "sideways")


def test_compute_label_orientation():
    # throughput halved -> half the performance
    assert compute_label(100.0, 50.0, THROUGHPUT) == 0.5
    # latency doubled -> half the performance
    assert compute_label(0.1, 0.2, LATENCY) == 0.5
    # better than ideal clamps to 1
    assert compute_label(100.0, 120.0, THROUGHPUT) == 1.0
    assert compute_label(0.2, 0.1, LATENCY) == 1.0


@pytest.mark.parametrize("ideal,actual", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
def test_compute_label_rejects_nonpositive(ideal, actual):
    with pytest.raises(ValueError):
        compute_label(ideal, actual, THROUGHPUT)


@given(st.floats(0.01, 1e6), st.floats(0.01, 1e6))
@settings(max_examples=60, deadline=None)
def test_compute_label_range(ideal, actual):
    for kind in (THROUGHPUT, LATENCY):
        assert 0.0 < compute_label(ideal, actual, kind) <= 1.0


# neighbor aggregation ----------------------------------------------------

def test_aggregate_neighbors_mean():
    primary = np.arange(6.0).reshape(2, 3)
    n1 = np.ones((2, 3))
    n2 = 3 * np.ones((2, 3))
    out = aggregate_neighbors(primary, [n1, n2])
    assert out.shape == (4, 3)
    assert np.array_equal(out[:2], primary)
    assert np.array_equal(out[2:], 2 * np.ones((2, 3)))


def test_aggregate_neighbors_empty_is_zero():
    primary = np.random.default_rng(0).normal(size=(3, 4))
    out = aggregate_neighbors(primary, [])
    assert np.array_equal(out[3:], np.zeros((3, 4)))


def test_aggregate_neighbors_shape_mismatch():
    with pytest.raises(SchemaError):
        aggregate_neighbors(np.zeros((2, 3)), [np.zeros((2, 4))])


# run and dataset validation ----------------------------------------------

def _run(schema, label=0.5, T=4, scenario="static"):
    return RunRecord(
        app_id="app00", scenario=scenario,
        matrix=np.zeros((schema.n_cols, T)), duration_T=T,
        pm_kind=THROUGHPUT, pm_ideal=100.0, pm_actual=label * 100.0,
        label_P=label,
    )


def test_run_validate_catches_bad_shapes():
    schema = MetricSchema.desk(n_base=3)
    good = _run(schema)
    good.validate(schema)

    bad = _run(schema)
    bad.matrix = np.zeros((schema.n_cols + 1, 4))
    with pytest.raises(ConsistencyError):
        bad.validate(schema)

    bad = _run(schema)
    bad.duration_T = 5
    with pytest.raises(ConsistencyError):
        bad.validate(schema)

    bad = _run(schema)
    bad.matrix[0, 0] = np.nan
    with pytest.raises(ConsistencyError):
        bad.validate(schema)


def test_run_validate_checks_label_consistency():
    schema = MetricSchema.desk(n_base=3)
    bad = _run(schema)
    bad.label_P = 0.75  # pm fields still imply 0.5
    with pytest.raises(ConsistencyError):
        bad.validate(schema)


def test_dataset_validate_app_classification():
    schema = MetricSchema.desk(n_base=3)
    runs = [_run(schema)]
    with pytest.raises(ConsistencyError):
        TraceDataset(runs, schema, apps={}).validate()
    with pytest.raises(ConsistencyError):
        TraceDataset(runs, schema, apps={"app00": MIXED}).validate()
    ds = TraceDataset(runs, schema, apps={"app00": STATIC_ONLY})
    ds.validate()
    assert ds.app_ids(STATIC_ONLY) == ["app00"]
    assert ds.app_ids(MIXED) == []
    assert ds.runs_for(["app00"]) == runs


# disk round trips --------------------------------------------------------

def test_run_roundtrip(tmp_path):
    schema = MetricSchema.desk(n_base=4)
    rng = np.random.default_rng(7)
    rec = RunRecord(
        app_id="app03", scenario="periodic",
        matrix=rng.normal(size=(schema.n_cols, 9)), duration_T=9,
        pm_kind=PM_KINDS["latency_ms"], pm_ideal=12.5, pm_actual=25.0,
        label_P=0.5,
    )
    write_run(rec, tmp_path / "r0", schema)
    back = read_run(tmp_path / "r0", schema)
    assert back.app_id == rec.app_id
    assert back.scenario == rec.scenario
    assert back.pm_kind == rec.pm_kind
    assert np.array_equal(back.matrix, rec.matrix)  # exact: repr round trip
    assert back.label_P == rec.label_P


def test_dataset_roundtrip(tmp_path):
    ds = small_dataset(seed=3, n_apps=11, runs_per_app=2)
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.apps == ds.apps
    assert len(back.runs) == len(ds.runs)
    orig = {(r.app_id, r.scenario, r.duration_T): r for r in ds.runs}
    for r in back.runs:
        assert np.array_equal(orig[(r.app_id, r.scenario, r.duration_T)].matrix,
                              r.matrix)


def test_validate_dataset_dir_clean(tmp_path):
    write_dataset(small_dataset(seed=1, n_apps=3, runs_per_app=2), tmp_path)
    assert validate_dataset_dir(tmp_path) == []


def test_validate_dataset_dir_reports_violations(tmp_path):
    write_dataset(small_dataset(seed=1, n_apps=3, runs_per_app=2), tmp_path)
    trace = next((tmp_path / "runs").rglob("trace.csv"))
    lines = trace.read_text().splitlines()
    trace.write_text("\n".join(lines[:-1]) + "\n")  # drop one second
    violations = validate_dataset_dir(tmp_path)
    assert violations
    assert any("duration" in v or "second" in v or "row" in v for v in violations)


def test_validate_dataset_dir_missing(tmp_path):
    assert validate_dataset_dir(tmp_path / "nope")
