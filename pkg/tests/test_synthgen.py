import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudformer.synthgen import (
    MIXED_CYCLE,
    AppSpec,
    ConfigError,
    GroundTruthLabeler,
    InterferenceConfig,
    WorkloadProfile,
    contention_series,
    gen_dataset,
    gen_trace,
    gen_workload,
    make_app_spec,
    recover_label,
)
from cloudformer.traceio import MIXED, STATIC_ONLY, MetricSchema

from helpers import small_dataset


# workload shapes -----------------------------------------------------------

def test_static_workload_constant():
    level = gen_workload(WorkloadProfile("static", 0.4), 16)
    assert np.all(level == 0.4)


def test_monotonic_workloads():
    up = gen_workload(WorkloadProfile("monotonic_up", 0.2, amplitude=0.5), 10)
    assert np.all(np.diff(up) > 0)
    assert up[0] == pytest.approx(0.2) and up[-1] == pytest.approx(0.7)
    down = gen_workload(WorkloadProfile("monotonic_down", 0.8, amplitude=0.5), 10)
    assert np.all(np.diff(down) < 0)
    assert down[-1] == pytest.approx(0.3)


def test_periodic_workload_exact_period():
    prof = WorkloadProfile("periodic", 0.2, amplitude=0.4, period_s=8)
    level = gen_workload(prof, 32)
    assert np.array_equal(level[:8], level[8:16])
    assert np.array_equal(level[:16], level[16:])
    assert level.min() >= 0.2 - 1e-12 and level.max() <= 0.6 + 1e-12


def test_random_workload_bounded_and_seeded():
    prof = WorkloadProfile("random", 0.5, amplitude=0.4, seed=11)
    a = gen_workload(prof, 64)
    b = gen_workload(prof, 64)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    c = gen_workload(WorkloadProfile("random", 0.5, amplitude=0.4, seed=12), 64)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("kwargs", [
    dict(kind="nope", base_level=0.5),
    dict(kind="static", base_level=1.5),
    dict(kind="monotonic_up", base_level=0.8, amplitude=0.5),
    dict(kind="monotonic_down", base_level=0.2, amplitude=0.5),
    dict(kind="periodic", base_level=0.2, amplitude=0.2),  # missing period
])
def test_workload_profile_validation(kwargs):
    with pytest.raises(ConfigError):
        WorkloadProfile(**kwargs)


def test_workload_needs_positive_T():
    with pytest.raises(ConfigError):
        gen_workload(WorkloadProfile("static", 0.5), 0)


def test_period_longer_than_T_rejected():
    with pytest.raises(ConfigError):
        gen_workload(WorkloadProfile("periodic", 0.2, amplitude=0.2, period_s=16), 8)


# interference and labels ----------------------------------------------------

def test_interference_config_validation():
    with pytest.raises(ConfigError):
        InterferenceConfig(n_neighbors=9)
    with pytest.raises(ConfigError):
        InterferenceConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        InterferenceConfig(noise_sigma=float("nan"))


def test_label_closed_form_value():
    # alpha=0.5, beta=1, gamma=0.25 at c=0.8, l=0.5:
    # 1 / (1 + 0.4 + 0.4 + 0.16) = 1/1.96
    labeler = GroundTruthLabeler(alpha=0.5, beta=1.0, gamma=0.25)
    assert labeler.label(0.8, 0.5) == pytest.approx(1.0 / 1.96, abs=1e-12)
    assert labeler.label(0.8, 0.5) == pytest.approx(0.5102, abs=5e-5)


def test_label_no_contention_is_one():
    labeler = GroundTruthLabeler(0.8, 0.6, 0.9)
    assert labeler.label(0.0, 0.7) == 1.0


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=80, deadline=None)
def test_label_in_unit_interval(c, l):
    labeler = GroundTruthLabeler(0.8, 0.6, 0.9)
    assert 0.0 < labeler.label(c, l) <= 1.0


def test_label_monotone_in_contention():
    labeler = GroundTruthLabeler(0.8, 0.6, 0.9)
    grid = [labeler.label(c, 0.5) for c in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(grid, grid[1:]))


def test_contention_series_no_neighbors():
    cfg = InterferenceConfig(n_neighbors=0)
    assert np.array_equal(contention_series(cfg, 8, 0), np.zeros(8))


def test_contention_series_bounded():
    c = contention_series(InterferenceConfig(n_neighbors=8), 64, 3)
    assert c.shape == (64,)
    assert c.min() >= 0.0 and c.max() <= 1.0


# traces ---------------------------------------------------------------------

def _spec_and_schema(seed=0, n_base=4):
    schema = MetricSchema.desk(n_base=n_base)
    return make_app_spec(0, schema, seed), schema


def test_gen_trace_shape_and_label():
    app, schema = _spec_and_schema()
    level = gen_workload(WorkloadProfile("static", 0.6), 12)
    rec = gen_trace(level, InterferenceConfig(), schema, seed=5, app=app)
    assert rec.matrix.shape == (schema.n_cols, 12)
    assert rec.duration_T == 12
    assert 0.0 < rec.label_P <= 1.0
    rec.validate(schema)


def test_recover_label_exact_without_noise():
    # inverting the affine responses reproduces the closed-form label
    cfg = InterferenceConfig(noise_sigma=0.0)
    labeler = GroundTruthLabeler(cfg.alpha, cfg.beta, cfg.gamma)
    for seed in range(5):
        app, schema = _spec_and_schema(seed=seed)
        prof = WorkloadProfile("monotonic_up", 0.1, amplitude=0.6)
        rec = gen_trace(gen_workload(prof, 20), cfg, schema, seed=seed, app=app)
        assert recover_label(rec, app, labeler) == pytest.approx(rec.label_P,
                                                                 abs=1e-9)


def test_app_specs_distinct_and_deterministic():
    schema = MetricSchema.desk(n_base=6)
    a0 = make_app_spec(0, schema, seed=0)
    a0_again = make_app_spec(0, schema, seed=0)
    a1 = make_app_spec(1, schema, seed=0)
    assert np.array_equal(a0.a_primary, a0_again.a_primary)
    assert not np.array_equal(a0.a_primary, a1.a_primary)
    assert not np.array_equal(a0.b_primary, a1.b_primary)


def test_app_spec_slopes_bounded_away_from_zero():
    schema = MetricSchema.desk(n_base=8)
    for i in range(6):
        app = make_app_spec(i, schema, seed=2)
        assert np.all(np.abs(app.b_primary) >= 0.7 - 1e-12)
        assert np.all(np.abs(app.b_neighbor) >= 0.7 - 1e-12)


def test_metric_directions_shared_across_apps():
    # the sign of a metric's response is a dataset property, not per app
    schema = MetricSchema.desk(n_base=8)
    signs = [np.sign(make_app_spec(i, schema, seed=4).b_primary)
             for i in range(5)]
    for s in signs[1:]:
        assert np.array_equal(signs[0], s)


# datasets ---------------------------------------------------------------------

def test_gen_dataset_composition():
    ds = small_dataset(seed=0, n_apps=11, runs_per_app=4)
    assert len(ds.runs) == 44
    assert len(ds.app_ids(STATIC_ONLY)) == 6
    assert len(ds.app_ids(MIXED)) == 5
    for run in ds.runs:
        assert 6 <= run.duration_T <= 10


def test_gen_dataset_deterministic():
    a = small_dataset(seed=9, n_apps=3, runs_per_app=3)
    b = small_dataset(seed=9, n_apps=3, runs_per_app=3)
    for ra, rb in zip(a.runs, b.runs):
        assert np.array_equal(ra.matrix, rb.matrix)
        assert ra.label_P == rb.label_P
    c = small_dataset(seed=10, n_apps=3, runs_per_app=3)
    assert any(not np.array_equal(ra.matrix, rc.matrix)
               for ra, rc in zip(a.runs, c.runs))


def test_mixed_apps_have_dynamic_first_run():
    assert MIXED_CYCLE[0] != "static"
    ds = small_dataset(seed=1, n_apps=11, runs_per_app=1)
    for app_id, kind in ds.apps.items():
        scenarios = {r.scenario for r in ds.runs_for([app_id])}
        if kind == MIXED:
            assert scenarios - {"static"}
        else:
            assert scenarios == {"static"}


def test_gen_dataset_validation_errors():
    with pytest.raises(ConfigError):
        gen_dataset(0, 4, 0.5, (8, 16), 0)
    with pytest.raises(ConfigError):
        gen_dataset(3, 4, 0.5, (16, 8), 0)


def test_gen_dataset_zero_runs_warns():
    with pytest.warns(UserWarning):
        ds = gen_dataset(3, 0, 0.5, (8, 16), 0, schema=MetricSchema.desk(3))
    assert ds.runs == []


def test_labels_cover_a_range():
    # contention varies per run, so labels must spread out
    ds = small_dataset(seed=0, n_apps=11, runs_per_app=8)
    labels = np.array([r.label_P for r in ds.runs])
    assert labels.max() > 0.9
    assert labels.min() < 0.6
    assert labels.std() > 0.05
