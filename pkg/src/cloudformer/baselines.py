"""Comparison methods: linear, gamma GLM, CART, random forest, and LSTM.

The feature-domain methods see one vector per run: the per-metric time
mean and time standard deviation of the normalized trace. The LSTM sees
the padded sequences themselves and is trained with the same loop as the
main model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ._rng import substream
from .nncore import Tensor, linear, no_grad, sigmoid
from .preprocess import Batch, NormStats, SplitSpec, fit_norm, make_batches, normalize_run
from .traceio import RunRecord, TraceDataset

__all__ = [
    "METHODS", "DEFAULT_SPACES", "featurize", "featurize_runs",
    "fit_linear", "predict_linear", "GlmFit", "fit_gamma_glm",
    "predict_gamma_glm", "TreeNode", "fit_cart", "predict_cart", "Forest",
    "fit_forest", "predict_forest", "LSTMConfig", "init_lstm_params",
    "lstm_forward", "fit_lstm", "predict_lstm", "tune", "BaselineRun",
    "run_baseline",
]

METHODS = ("lr", "glr", "dt", "rf", "lstm")

RIDGE_JITTER = 1e-8


# featurization ---------------------------------------------------------------

def featurize(run: RunRecord, stats: NormStats) -> np.ndarray:
    """Per-metric mean and population std over the run's seconds (length 2S)."""
    z = normalize_run(run, stats).matrix       # metrics x seconds
    if z.shape[1] == 0:
        raise ValueError("cannot featurize a run with zero seconds")
    return np.concatenate([z.mean(axis=1), z.std(axis=1)])


def featurize_runs(runs: list[RunRecord], stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([featurize(r, stats) for r in runs])
    y = np.array([r.label_P for r in runs])
    return X, y


# linear regression -----------------------------------------------------------

def fit_linear(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least squares by normal equations; returns (slopes..., intercept).

    A tiny ridge term keeps the system solvable under duplicated or
    constant columns.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-D array")
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    G = A.T @ A + RIDGE_JITTER * np.eye(A.shape[1])
    return np.linalg.solve(G, A.T @ y)


def predict_linear(w: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ w[:-1] + w[-1]


# gamma GLM -------------------------------------------------------------------

@dataclass
class GlmFit:
    beta: np.ndarray                   # (p + 1,), intercept last
    converged: bool
    n_iter: int
    deviance: float
    dispersion: float


def _gamma_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum((y - mu) / mu - np.log(y / mu)))


def fit_gamma_glm(X: np.ndarray, y: np.ndarray, max_iter: int = 100,
                  tol: float = 1e-8) -> GlmFit:
    """IRLS for a Gamma GLM with the inverse power link g(mu) = 1/mu.

    Step-halving keeps the linear predictor positive; failure to converge
    is reported in the returned fit, never hidden.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("gamma regression needs strictly positive targets")
    n = y.size
    A = np.hstack([X, np.ones((n, 1))])
    p = A.shape[1]
    # start from the intercept-only fit: eta > 0 everywhere by construction
    beta = np.zeros(p)
    beta[-1] = 1.0 / float(y.mean())
    eta = A @ beta
    mu = 1.0 / eta
    dev = _gamma_deviance(y, mu)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # inverse link: eta = 1/mu, d(eta)/d(mu) = -1/mu^2, IRLS weight mu^2
        W = mu * mu
        z = eta - (y - mu) / (mu * mu)
        AW = A * W[:, None]
        G = A.T @ AW + RIDGE_JITTER * np.eye(p)
        beta_new = np.linalg.solve(G, AW.T @ z)
        step = 1.0
        accepted = False
        for _ in range(30):
            cand = beta + step * (beta_new - beta)
            eta_c = A @ cand
            if np.all(eta_c > 0):
                dev_c = _gamma_deviance(y, 1.0 / eta_c)
                if dev_c <= dev + 1e-12:
                    beta, eta, mu, prev_dev = cand, eta_c, 1.0 / eta_c, dev
                    dev = dev_c
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
        if abs(prev_dev - dev) < tol * (abs(dev) + 0.1):
            converged = True
            break
    resid = (y - mu) / mu
    dof = max(n - p, 1)
    return GlmFit(beta=beta, converged=converged, n_iter=it, deviance=dev,
                  dispersion=float(resid @ resid) / dof)


def predict_gamma_glm(fit: GlmFit, X: np.ndarray) -> np.ndarray:
    """mu = 1/(X beta); the linear predictor is kept away from 0 so the
    output stays finite (it may still be huge or negative out of sample,
    which is the known failure mode of this link)."""
    eta = X @ fit.beta[:-1] + fit.beta[-1]
    eta = np.where(np.abs(eta) < 1e-12, np.copysign(1e-12, eta), eta)
    return 1.0 / eta


# CART ------------------------------------------------------------------------

@dataclass
class TreeNode:
    value: float
    n: int
    feature: int = -1             # -1 marks a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaves(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.leaves() + self.right.leaves()


def _best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray,
                min_leaf: int):
    """(gain, feature, threshold) of the best variance-reduction split.

    Ties resolve to the lowest feature index, then the lowest threshold:
    features are scanned in ascending order, candidate positions in
    ascending threshold order, and only strict improvements are taken.
    """
    n = y.size
    sy = float(y.sum())
    sy2 = float((y * y).sum())
    sse_parent = sy2 - sy * sy / n
    best = None
    for f in features:
        xs = X[:, f]
        order = np.argsort(xs, kind="stable")
        xv = xs[order]
        yv = y[order]
        idx = np.arange(min_leaf - 1, n - min_leaf)
        if idx.size == 0:
            continue
        ok = xv[idx] < xv[idx + 1]
        if not ok.any():
            continue
        idx = idx[ok]
        cy = np.cumsum(yv)
        cy2 = np.cumsum(yv * yv)
        nl = idx + 1.0
        nr = n - nl
        sl = cy[idx]
        sl2 = cy2[idx]
        sr = sy - sl
        sr2 = sy2 - sl2
        sse = (sl2 - sl * sl / nl) + (sr2 - sr * sr / nr)
        j = int(np.argmin(sse))          # first minimum -> lowest threshold
        gain = sse_parent - float(sse[j])
        if gain > 1e-12 and (best is None or gain > best[0]):
            thr = 0.5 * (xv[idx[j]] + xv[idx[j] + 1])
            if thr >= xv[idx[j] + 1]:    # midpoint of adjacent floats can
                thr = xv[idx[j]]         # round up; keep thr in [left, right)
            best = (gain, int(f), float(thr))
    return best


def fit_cart(X: np.ndarray, y: np.ndarray, max_depth: int | None = None,
             min_leaf: int = 1, min_split: int = 2,
             split_frac: float = 1.0, rng: np.random.Generator | None = None,
             ) -> TreeNode:
    """Greedy variance-reduction regression tree.

    split_frac < 1 considers a random subset of features at every split
    (requires rng); 1.0 is the plain deterministic CART.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size or y.size == 0:
        raise ValueError("X must be (n, p) with matching non-empty y")
    if not 0.0 < split_frac <= 1.0:
        raise ValueError("split_frac must be in (0, 1]")
    if split_frac < 1.0 and rng is None:
        raise ValueError("split_frac < 1 requires an rng")
    if min_leaf < 1 or min_split < 2:
        raise ValueError("need min_leaf >= 1 and min_split >= 2")
    p = X.shape[1]
    k = max(1, int(np.ceil(split_frac * p)))
    root = TreeNode(value=float(y.mean()), n=y.size)
    stack = [(root, np.arange(y.size), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if (max_depth is not None and depth >= max_depth) \
                or rows.size < min_split or rows.size < 2 * min_leaf:
            continue
        if split_frac < 1.0:
            features = np.sort(rng.choice(p, size=k, replace=False))
        else:
            features = np.arange(p)
        found = _best_split(X[rows], y[rows], features, min_leaf)
        if found is None:
            continue
        _, f, thr = found
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        node.feature = f
        node.threshold = thr
        node.left = TreeNode(value=float(y[lrows].mean()), n=lrows.size)
        node.right = TreeNode(value=float(y[rrows].mean()), n=rrows.size)
        stack.append((node.left, lrows, depth + 1))
        stack.append((node.right, rrows, depth + 1))
    return root


def predict_cart(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[0])
    stack = [(tree, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if node.is_leaf:
            out[rows] = node.value
            continue
        go_left = X[rows, node.feature] <= node.threshold
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return out


# random forest ---------------------------------------------------------------

@dataclass
class Forest:
    trees: list[TreeNode]
    feature_sets: list[np.ndarray]
    seed: int
    params: dict = field(default_factory=dict)


def fit_forest(X: np.ndarray, y: np.ndarray, n_trees: int = 50,
               min_leaf: int = 1, feature_frac: float = 1.0, seed: int = 0,
               max_depth: int | None = None, min_split: int = 2,
               bootstrap: bool = True) -> Forest:
    """Bootstrapped trees over per-tree feature subsets; mean prediction."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if not 0.0 < feature_frac <= 1.0:
        raise ValueError("feature_frac must be in (0, 1]")
    n, p = X.shape
    k = max(1, int(np.ceil(feature_frac * p)))
    trees, fsets = [], []
    for t in range(n_trees):
        rng = substream(seed, "forest-tree", t)
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        feats = np.sort(rng.choice(p, size=k, replace=False)) if k < p else np.arange(p)
        trees.append(fit_cart(X[np.ix_(rows, feats)], y[rows],
                              max_depth=max_depth, min_leaf=min_leaf,
                              min_split=min_split))
        fsets.append(feats)
    return Forest(trees=trees, feature_sets=fsets, seed=seed,
                  params={"n_trees": n_trees, "min_leaf": min_leaf,
                          "feature_frac": feature_frac, "max_depth": max_depth,
                          "min_split": min_split, "bootstrap": bootstrap})


def predict_forest(forest: Forest, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    acc = np.zeros(X.shape[0])
    for tree, feats in zip(forest.trees, forest.feature_sets):
        acc += predict_cart(tree, X[:, feats])
    return acc / len(forest.trees)


# LSTM ------------------------------------------------------------------------

@dataclass(frozen=True)
class LSTMConfig:
    input_dim: int
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden < 1:
            raise ValueError("input_dim and hidden must be >= 1")


def init_lstm_params(cfg: LSTMConfig) -> dict[str, Tensor]:
    """Gate order (input, forget, cell, output); forget bias starts at 1."""
    rng = substream(cfg.seed, "lstm-init")
    S, H = cfg.input_dim, cfg.hidden

    def glorot(fan_in, fan_out, shape):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0
    return {
        "W_x": Tensor(glorot(S, H, (S, 4 * H)), True),
        "W_h": Tensor(glorot(H, H, (H, 4 * H)), True),
        "b": Tensor(b, True),
        "out.W": Tensor(glorot(H, 1, (H, 1)) * 0.25, True),
        "out.b": Tensor(np.zeros(1), True),
    }


def lstm_forward(params: dict[str, Tensor], batch: Batch,
                 training: bool = False, rng=None) -> Tensor:
    """Run the recurrence and read out the last valid state per sample.

    Masked steps carry the previous state through unchanged, so the final
    state equals the state at each sample's last real second regardless of
    padding length.
    """
    B, T, S = batch.values.shape
    H = params["W_h"].data.shape[0]
    if T == 0:
        raise ValueError("LSTM needs at least one timestep")
    zeros = np.zeros((B, H))
    h = Tensor(zeros)
    c = Tensor(zeros)
    for t in range(T):
        z = linear(Tensor(batch.values[:, t, :]), params["W_x"], params["b"]) \
            + h @ params["W_h"]
        i = z[:, 0:H].sigmoid()
        f = z[:, H:2 * H].sigmoid()
        g = z[:, 2 * H:3 * H].tanh()
        o = z[:, 3 * H:4 * H].sigmoid()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        m = batch.mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            keep = Tensor(m[:, None].astype(np.float64))
            drop = Tensor((~m)[:, None].astype(np.float64))
            h = h_new * keep + h * drop
            c = c_new * keep + c * drop
    return sigmoid(linear(h, params["out.W"], params["out.b"]))


def fit_lstm(train_batches: list[Batch], val_batches: list[Batch],
             cfg: LSTMConfig, train_cfg) -> tuple[dict[str, Tensor], Any]:
    """Train with the shared loop; returns (params, log)."""
    from .train import fit
    params = init_lstm_params(cfg)

    def forward_fn(batch, training, rng):
        return lstm_forward(params, batch, training, rng)

    log = fit(forward_fn, params, train_batches, val_batches, train_cfg)
    return params, log


def predict_lstm(params: dict[str, Tensor], batches: list[Batch]) -> np.ndarray:
    with no_grad():
        preds = [lstm_forward(params, b, False).data.reshape(-1) for b in batches]
    return np.concatenate(preds)


# hyperparameter search ---------------------------------------------------------

DEFAULT_SPACES: dict[str, dict[str, list]] = {
    "lr": {},
    "glr": {},
    "dt": {
        "max_depth": [2, 3, 4, 6, 8, 12],
        "min_leaf": [1, 2, 4, 8],
        "min_split": [2, 4, 8],
        "split_frac": [1.0, 0.8, 0.6],
    },
    "rf": {
        "n_trees": [10, 20, 30],
        "max_depth": [4, 6, 8],
        "min_leaf": [1, 2, 4],
        "feature_frac": [0.3, 0.5, 0.8],
    },
}


def _fit_and_predict(method: str, hp: dict, X_tr, y_tr, X_te, seed: int) -> np.ndarray:
    if method == "lr":
        return predict_linear(fit_linear(X_tr, y_tr), X_te)
    if method == "glr":
        return predict_gamma_glm(fit_gamma_glm(X_tr, y_tr), X_te)
    if method == "dt":
        hp = dict(hp)
        frac = hp.pop("split_frac", 1.0)
        rng = substream(seed, "cart-split") if frac < 1.0 else None
        tree = fit_cart(X_tr, y_tr, split_frac=frac, rng=rng, **hp)
        return predict_cart(tree, X_te)
    if method == "rf":
        return predict_forest(fit_forest(X_tr, y_tr, seed=seed, **hp), X_te)
    raise ValueError(f"unknown feature-domain method {method!r}")


def tune(method: str, X: np.ndarray, y: np.ndarray, budget: int = 50,
         k_folds: int = 3, seed: int = 0,
         space: dict[str, list] | None = None) -> dict:
    """Seeded random search with k-fold CV, selecting by mean fold MAE.

    Deterministic for a given seed; ties keep the first-sampled candidate.
    """
    if space is None:
        space = DEFAULT_SPACES[method]
    n = y.size
    if k_folds < 2 or k_folds > n:
        raise ValueError(f"k_folds must be in [2, {n}], got {k_folds}")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not space:
        return {}
    keys = sorted(space)
    candidates = []
    for c in range(budget):
        rng = substream(seed, "tune-cand", c)
        candidates.append({k: space[k][rng.integers(len(space[k]))] for k in keys})
    perm = substream(seed, "tune-folds").permutation(n)
    folds = np.array_split(perm, k_folds)
    best_hp, best_mae = None, np.inf
    for ci, hp in enumerate(candidates):
        maes = []
        for fi, va in enumerate(folds):
            tr = np.setdiff1d(perm, va, assume_unique=True)
            pred = _fit_and_predict(method, hp, X[tr], y[tr], X[va],
                                    substream(seed, "tune-fit", ci, fi).integers(2**31))
            maes.append(float(np.abs(pred - y[va]).mean()))
        mean_mae = float(np.mean(maes))
        if mean_mae < best_mae:
            best_mae, best_hp = mean_mae, hp
    return best_hp


# end-to-end ------------------------------------------------------------------

@dataclass
class BaselineRun:
    method: str
    hyperparams: dict
    pred_test: np.ndarray
    y_test: np.ndarray
    extras: dict = field(default_factory=dict)


def run_baseline(method: str, dataset: TraceDataset, split: SplitSpec,
                 seed: int = 0, budget: int = 50, k_folds: int = 3,
                 space: dict[str, list] | None = None,
                 stats: NormStats | None = None,
                 lstm_hidden: int = 64, lstm_train=None) -> BaselineRun:
    """Fit one baseline on the split's training apps, predict its test runs.

    Test predictions align with dataset.runs_for(split.test_apps) order.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    train_runs = dataset.runs_for(split.train_apps)
    test_runs = dataset.runs_for(split.test_apps)
    if not train_runs or not test_runs:
        raise ValueError("split selects no training or no test runs")
    if stats is None:
        stats = fit_norm(train_runs)
    y_test = np.array([r.label_P for r in test_runs])

    if method == "lstm":
        from .train import TrainConfig, _carve_validation
        tc = lstm_train or TrainConfig(epochs=60, batch_size=16, seed=seed,
                                       peak_lr=3e-3, patience=15)
        by_app: dict[str, list] = {}
        for r in train_runs:
            by_app.setdefault(r.app_id, []).append(normalize_run(r, stats))
        tr, va = _carve_validation(by_app, tc.seed, tc.val_fraction)
        params, log = fit_lstm(make_batches(tr, tc.batch_size),
                               make_batches(va, tc.batch_size) if va else [],
                               LSTMConfig(input_dim=dataset.schema.n_cols,
                                          hidden=lstm_hidden, seed=seed), tc)
        from .preprocess import pad_batch
        test_norm = [normalize_run(r, stats) for r in test_runs]
        chunks = [pad_batch(test_norm[i:i + tc.batch_size])
                  for i in range(0, len(test_norm), tc.batch_size)]
        pred = predict_lstm(params, chunks)
        return BaselineRun(method, {"hidden": lstm_hidden}, pred, y_test,
                           extras={"best_val_mae": log.best_val_mae,
                                   "epochs": len(log.epochs)})

    X_tr, y_tr = featurize_runs(train_runs, stats)
    X_te, _ = featurize_runs(test_runs, stats)
    hp = tune(method, X_tr, y_tr, budget=budget, k_folds=k_folds,
              seed=seed, space=space)
    pred = _fit_and_predict(method, hp, X_tr, y_tr, X_te,
                            substream(seed, "final-fit").integers(2**31))
    return BaselineRun(method, hp, pred, y_test)
