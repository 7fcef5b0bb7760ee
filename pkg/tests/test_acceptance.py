"""Acceptance suite: eleven end-to-end checks at fixed tolerances.

Every check records a [PASS]/[FAIL]/[SKIP] line that conftest prints in a
summary section after the run (and echoes immediately under `pytest -s`).
Criteria 7 and 8 share one six-seed study and together take the bulk of
the suite's runtime; everything else finishes in seconds.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from cloudformer.baselines import (
    LSTMConfig,
    fit_cart,
    fit_forest,
    fit_gamma_glm,
    fit_linear,
    fit_lstm,
    predict_cart,
    predict_forest,
    predict_linear,
)
from cloudformer.cli import main as cli_main
from cloudformer.evalreport import StudyConfig, run_matrix
from cloudformer.model import CloudFormerConfig, forward, init_params
from cloudformer.nncore import (
    Tensor,
    attention,
    backward,
    positional_encoding,
    set_finite_checks,
)
from cloudformer.preprocess import Batch, fit_norm, normalize_run, pad_batch
from cloudformer.synthgen import gen_dataset
from cloudformer.traceio import MetricSchema, validate_dataset_dir
from cloudformer.train import (
    AdamState,
    ScheduleConfig,
    TrainConfig,
    adam_step,
    logcosh_loss,
    lr_at,
)

from helpers import rel_err


def record(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"{name}: {detail}" if detail else name
    conftest.ACCEPTANCE[num] = (status, line)
    print(f"[{status}] {num}. {line}")
    assert ok, f"acceptance {num} failed - {line}"


def _random_batch(rng: np.random.Generator, S: int, B: int, t_max: int) -> Batch:
    lengths = rng.integers(max(2, t_max // 2), t_max + 1, size=B)
    values = np.zeros((B, t_max, S))
    mask = np.zeros((B, t_max), dtype=bool)
    for b, L in enumerate(lengths):
        values[b, :L, :] = rng.normal(size=(L, S))
        mask[b, :L] = True
    return Batch(values=values, mask=mask,
                 labels=rng.uniform(0.2, 0.95, size=B),
                 lengths=lengths.astype(np.int64))


# 1 ----------------------------------------------------------------------------

def _fd_entry(cfg, seed, name, i, h):
    """(analytic, central-difference) for one parameter entry on a fresh
    batch and init drawn from `seed`."""
    rng = np.random.default_rng(seed)
    batch = _random_batch(rng, S=cfg.S, B=2, t_max=5)
    params = init_params(cfg, seed)

    def build():
        return logcosh_loss(forward(batch, params, cfg), batch.labels)

    for p in params.tensors.values():
        p.grad = None
    backward(build())
    flat = params.tensors[name].data.reshape(-1)
    orig = flat[i]
    flat[i] = orig + h
    fp = float(build().data)
    flat[i] = orig - h
    fm = float(build().data)
    flat[i] = orig
    return params.tensors[name].grad.reshape(-1)[i], (fp - fm) / (2.0 * h)


def test_01_gradient_fidelity():
    """Analytic gradients match central differences on the smallest model.

    100 seeds, each with a fresh init and batch; the parameter entries are
    partitioned across seeds in two interleaved passes, so every entry is
    finite-difference checked under two different seeds while the total
    work stays inside the runtime budget. A probe whose +-h evaluations
    straddle a relu kink is not differentiable there; such entries are
    re-probed on fresh seeds, where a genuine gradient bug would still
    reproduce while a kink crossing does not.
    """
    t0 = time.perf_counter()
    cfg = CloudFormerConfig.tiny(S=6)
    n_seeds = 100
    h, rtol = 1e-5, 1e-4
    entry_index = [(name, i)
                   for name in sorted(init_params(cfg, 0).tensors)
                   for i in range(init_params(cfg, 0).tensors[name].data.size)]
    worst = 0.0
    checked = 0
    suspects: list[tuple[str, int]] = []
    prev = set_finite_checks(False)
    try:
        for s in range(n_seeds):
            rng = np.random.default_rng(1000 + s)
            batch = _random_batch(rng, S=6, B=2, t_max=5)
            params = init_params(cfg, s)

            def build():
                return logcosh_loss(forward(batch, params, cfg), batch.labels)

            for p in params.tensors.values():
                p.grad = None
            backward(build())
            analytic = {k: p.grad for k, p in params.tensors.items()}
            assert all(g is not None for g in analytic.values())
            todo = entry_index[s::n_seeds] \
                + entry_index[(s + n_seeds // 2) % n_seeds::n_seeds]
            for name, i in todo:
                flat = params.tensors[name].data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + h
                fp = float(build().data)
                flat[i] = orig - h
                fm = float(build().data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                err = rel_err(analytic[name].reshape(-1)[i], fd)
                checked += 1
                if err < rtol:
                    worst = max(worst, err)
                else:
                    suspects.append((name, i))
        # systematic errors reproduce everywhere; kink hits are one-off
        assert len(suspects) <= max(3, checked // 500), \
            f"{len(suspects)} of {checked} probes disagree - not a kink artifact"
        retried = 0.0
        for name, i in suspects:
            for retry_seed in (7001, 7002, 7003):
                a, fd = _fd_entry(cfg, retry_seed, name, i, h)
                retried = max(retried, rel_err(a, fd))
        worst = max(worst, retried)
    finally:
        set_finite_checks(prev)
    elapsed = time.perf_counter() - t0
    record(1, "gradient fidelity",
           worst < rtol and elapsed < 120.0,
           f"worst rel err {worst:.2e} over {checked} entry checks "
           f"({len(entry_index)} params x 2 seeds, {len(suspects)} re-probed), "
           f"{elapsed:.1f}s")


# 2 ----------------------------------------------------------------------------

def test_02_masking_invariance():
    rng = np.random.default_rng(2)
    cfg = CloudFormerConfig.desk(24)
    params = init_params(cfg, 0)
    batch = _random_batch(rng, S=24, B=50, t_max=20)
    base = forward(batch, params, cfg).data
    T = batch.values.shape[1]
    grown = Batch(
        values=np.concatenate([batch.values, np.zeros((50, T, 24))], axis=1),
        mask=np.concatenate([batch.mask, np.zeros((50, T), dtype=bool)], axis=1),
        labels=batch.labels, lengths=batch.lengths)
    diff = float(np.max(np.abs(forward(grown, params, cfg).data - base)))
    record(2, "masking invariance", diff < 1e-8,
           f"doubling padding moves 50 outputs by at most {diff:.2e}")


# 3 ----------------------------------------------------------------------------

def test_03_system_permutation_invariance():
    rng = np.random.default_rng(3)
    cfg = CloudFormerConfig.desk(24, variant="system_only",
                                 metric_identity_embeddings=False)
    params = init_params(cfg, 0)
    batch = _random_batch(rng, S=24, B=50, t_max=12)
    base = forward(batch, params, cfg).data
    diff = 0.0
    for _ in range(50):
        perm = rng.permutation(24)
        shuffled = Batch(values=batch.values[:, :, perm], mask=batch.mask,
                         labels=batch.labels, lengths=batch.lengths)
        out = forward(shuffled, params, cfg).data
        diff = max(diff, float(np.max(np.abs(out - base))))
    record(3, "system-branch permutation invariance", diff < 1e-9,
           f"50 metric permutations move outputs by at most {diff:.2e}")


# 4 ----------------------------------------------------------------------------

def test_04_kernel_oracles():
    pe = positional_encoding(64, 32)
    circle = float(np.max(np.abs(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2 - 1.0)))

    rng = np.random.default_rng(4)
    q = Tensor(rng.normal(size=(4, 6, 8)))
    k = Tensor(rng.normal(size=(4, 6, 8)))
    v = Tensor(rng.normal(size=(4, 6, 8)))
    mask = rng.random((4, 1, 6)) > 0.4
    mask[..., 0] = True                      # every query keeps a key
    _, weights = attention(q, k, v, mask)
    row_sums = weights.data.sum(axis=-1)
    rows_ok = float(np.max(np.abs(row_sums - 1.0))) < 1e-9
    masked_vals = weights.data[~np.broadcast_to(mask, weights.data.shape)]
    masked_ok = masked_vals.size > 0 and np.all(masked_vals == 0.0)

    lc = float(logcosh_loss(np.array([1.0]), np.array([0.0])).data)
    lc_ok = abs(lc - 0.433781) < 1e-6

    sched = ScheduleConfig(warmup_steps=100, total_steps=1000)
    at_boundary = lr_at(sched.warmup_steps, sched)
    jump = abs(at_boundary - lr_at(sched.warmup_steps - 1, sched))
    lr_ok = (abs(at_boundary - 1e-5) < 1e-18
             and jump <= sched.peak_lr / sched.warmup_steps + 1e-18)

    record(4, "kernel oracles",
           circle < 1e-12 and rows_ok and masked_ok and lc_ok and lr_ok,
           f"PE circle residual {circle:.1e}; attention rows sum to 1 and "
           f"masked weights are exact zeros; logcosh(1)={lc:.6f}; "
           f"lr at warm-up boundary {at_boundary:.1e}")


# 5 ----------------------------------------------------------------------------

def test_05_optimizer_oracle():
    theta = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    state = AdamState.init(theta)
    adam_step(theta, {"w": np.array([2.0])}, state, lr=0.1)
    first_step = abs(1.0 - float(theta["w"].data[0]))
    first_ok = abs(first_step - 0.1) < 1e-6
    for _ in range(199):
        adam_step(theta, {"w": 2.0 * theta["w"].data}, state, lr=0.1)
    final = abs(float(theta["w"].data[0]))
    record(5, "optimizer oracle", first_ok and final < 1e-2,
           f"first step {first_step:.8f} (target 0.1), "
           f"|theta| after 200 steps {final:.2e}")


# 6 ----------------------------------------------------------------------------

def test_06_memorization():
    ds = gen_dataset(11, 4, 6 / 11, (6, 10), 0, schema=MetricSchema.desk(n_base=3))
    runs = ds.runs[:8]
    stats = fit_norm(runs)
    batch = pad_batch([normalize_run(r, stats) for r in runs])
    tcfg = TrainConfig(epochs=500, batch_size=8, peak_lr=1e-2, patience=500)

    t0 = time.perf_counter()
    cfg = CloudFormerConfig.tiny(S=6)
    params = init_params(cfg, 0)
    from cloudformer.train import fit

    def fwd(b, training, rng):
        return forward(b, params, cfg, training, rng)

    cf_log = fit(fwd, params.tensors, [batch], [batch], tcfg)
    cf_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    _, lstm_log = fit_lstm([batch], [batch],
                           LSTMConfig(input_dim=6, hidden=32, seed=0), tcfg)
    lstm_time = time.perf_counter() - t0

    ok = (cf_log.best_val_mae < 1.0 and cf_time < 300.0
          and lstm_log.best_val_mae < 2.0 and lstm_time < 300.0)
    record(6, "memorization of 8 runs", ok,
           f"CF train MAE {cf_log.best_val_mae:.3f}pp in {cf_time:.0f}s; "
           f"LSTM {lstm_log.best_val_mae:.3f}pp in {lstm_time:.0f}s")


# 7 and 8 share one six-seed study ----------------------------------------------

@pytest.fixture(scope="module")
def study():
    dataset = gen_dataset(11, 64, 6 / 11, (16, 64), 0,
                          schema=MetricSchema.desk(n_base=12))
    config = StudyConfig(
        methods=("lr", "glr", "dt", "rf", "lstm", "cf", "cf_temporal",
                 "cf_system"),
        seeds=(0, 1, 2, 3, 4, 5),
        model=CloudFormerConfig.desk(24),
        train=TrainConfig(epochs=120, batch_size=32, peak_lr=8e-3, patience=120),
        lstm_hidden=32,
        lstm_train=TrainConfig(epochs=40, batch_size=32, peak_lr=3e-3,
                               patience=15),
        budget=8, k_folds=3, batch_size=32)
    t0 = time.perf_counter()
    report = run_matrix(dataset, config)
    return report, time.perf_counter() - t0


def test_07_synthetic_end_to_end(study):
    report, elapsed = study
    mean = {m: report.aggregate[m]["mae_mean"] for m in report.methods}
    best = min(mean.values())
    cf_band = report.band_mass("cf", "lt10")
    linear_bands = {m: report.band_mass(m, "lt10") for m in ("lr", "glr")}
    ok = (mean["cf"] < mean["lr"]
          and mean["cf"] < mean["glr"]
          and mean["cf"] <= 1.25 * best
          and all(cf_band >= b for b in linear_bands.values())
          and elapsed < 1800.0)
    summary = " ".join(f"{m}={mean[m]:.2f}" for m in report.methods)
    record(7, "synthetic end-to-end study", ok,
           f"mean test MAE(pp) {summary}; cf <10pp mass {cf_band:.3f} vs "
           f"lr {linear_bands['lr']:.3f}, glr {linear_bands['glr']:.3f}; "
           f"{elapsed/60:.1f} min")


def test_08_ablation(study):
    report, _ = study
    cf = report.aggregate["cf"]["mae_mean"]
    t = report.aggregate["cf_temporal"]["mae_mean"]
    s = report.aggregate["cf_system"]["mae_mean"]
    ok = t <= 1.5 * cf and s <= 1.5 * cf and cf <= min(t, s) + 1.0
    record(8, "single-branch ablations", ok,
           f"cf {cf:.2f}pp, temporal-only {t:.2f}pp, system-only {s:.2f}pp")


# 9 ----------------------------------------------------------------------------

def test_09_baseline_oracles():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(300, 6))
    w_true = rng.normal(size=6)
    w = fit_linear(X, X @ w_true + 1.5)
    lr_err = float(np.max(np.abs(w - np.append(w_true, 1.5))))

    Xd = rng.permutation(32).reshape(-1, 1).astype(np.float64)
    yd = rng.normal(size=32)
    cart_mse = float(np.mean((predict_cart(fit_cart(Xd, yd), Xd) - yd) ** 2))

    Xf = rng.normal(size=(60, 3))
    yf = rng.normal(size=60)
    one_tree = predict_forest(
        fit_forest(Xf, yf, n_trees=1, bootstrap=False, feature_frac=1.0), Xf)
    forest_eq = bool(np.array_equal(one_tree, predict_cart(fit_cart(Xf, yf), Xf)))

    n = 10_000
    xg = rng.uniform(0.0, 1.0, size=(n, 1))
    eta = 0.5 * xg[:, 0] + 2.0
    yg = rng.gamma(shape=25.0, scale=(1.0 / eta) / 25.0)
    glm = fit_gamma_glm(xg, yg)
    glm_err = max(abs(glm.beta[0] - 0.5) / 0.5, abs(glm.beta[-1] - 2.0) / 2.0)

    ok = lr_err < 1e-8 and cart_mse == 0.0 and forest_eq and glm_err < 0.05
    record(9, "baseline oracles", ok,
           f"planted linear coeffs within {lr_err:.1e}; CART train MSE "
           f"{cart_mse}; one-tree forest equals CART: {forest_eq}; "
           f"gamma IRLS rel err {glm_err:.3f}")


# 10 ---------------------------------------------------------------------------

def test_10_manifest_reproducibility(tmp_path):
    data = tmp_path / "data"
    rc = cli_main(["synth", "--data-dir", str(data), "--apps", "11",
                   "--runs-per-app", "4", "--t-min", "6", "--t-max", "10",
                   "--n-base", "3"])
    assert rc == 0
    fast = ["--preset", "tiny", "--epochs", "1", "--batch-size", "16",
            "--peak-lr", "0.001", "--budget", "2", "--k-folds", "2",
            "--lstm-hidden", "4", "--lstm-epochs", "1", "--seeds", "0"]
    outputs: dict[str, Path] = {"synth": data}
    commands = {
        "train": ["train", "--data-dir", str(data), "--preset", "tiny",
                  "--epochs", "1", "--batch-size", "16", "--peak-lr", "0.001"],
        "baselines": ["baselines", "--data-dir", str(data),
                      "--methods", "lr,dt", *fast],
        "ablate": ["ablate", "--data-dir", str(data), *fast],
        "eval": ["eval", "--data-dir", str(data), "--methods", "lr,cf", *fast],
    }
    for name, argv in commands.items():
        out = tmp_path / name
        assert cli_main([*argv, "--out", str(out)]) == 0
        outputs[name] = out
    report_out = tmp_path / "report"
    assert cli_main(["report", "--source", str(outputs["eval"] / "report.json"),
                     "--out", str(report_out)]) == 0
    outputs["report"] = report_out

    mismatches = []
    for name, out in outputs.items():
        replayed = tmp_path / f"{name}-replay"
        rc = cli_main(["replay", "--manifest", str(out / "manifest.json"),
                       "--out", str(replayed)])
        assert rc == 0, name
        for p in sorted(out.rglob("*")):
            if p.is_dir() or p.name == "manifest.json":
                continue
            twin = replayed / p.relative_to(out)
            if not twin.exists() or twin.read_bytes() != p.read_bytes():
                mismatches.append(f"{name}/{p.relative_to(out)}")
    record(10, "manifest replay reproducibility", not mismatches,
           "byte-identical artifacts for "
           + ", ".join(outputs) + (f"; mismatches: {mismatches}" if mismatches
                                   else ""))


# 11 ---------------------------------------------------------------------------

def test_11_real_data_ingestion():
    root = os.environ.get("CF_REAL_DATA")
    if not root:
        conftest.ACCEPTANCE[11] = (
            "SKIP", "real-data ingestion: set CF_REAL_DATA to a converted "
                    "dataset directory to enable")
        print("[SKIP] 11. real-data ingestion (CF_REAL_DATA not set)")
        pytest.skip("CF_REAL_DATA not set; real-data check is optional")
    violations = validate_dataset_dir(Path(root))
    record(11, "real-data ingestion", not violations,
           f"{len(violations)} violations in {root}")
