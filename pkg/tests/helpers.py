"""Shared test utilities: finite-difference gradient checking and tiny data."""

from __future__ import annotations

import numpy as np

from cloudformer.nncore import Tensor, backward, set_finite_checks
from cloudformer.synthgen import InterferenceConfig, gen_dataset
from cloudformer.traceio import MetricSchema


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f with respect to arr.

    f must re-read arr on every call; the array is perturbed in place and
    restored afterwards.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(build, params: dict[str, Tensor], h: float = 1e-5,
              rtol: float = 1e-4) -> float:
    """Compare backward() against central differences for every parameter.

    build() must construct the scalar loss from the live params dict.
    Returns the worst relative error seen.
    """
    for p in params.values():
        p.grad = None
    loss = build()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    prev = set_finite_checks(False)
    try:
        worst = 0.0
        for k, p in params.items():
            fd = numeric_grad(lambda: float(build().data), p.data, h)
            err = rel_err(analytic[k], fd)
            assert err < rtol, f"gradient mismatch for {k}: rel err {err:.3e}"
            worst = max(worst, err)
    finally:
        set_finite_checks(prev)
    return worst


def small_dataset(seed: int = 0, n_apps: int = 11, runs_per_app: int = 4,
                  n_base: int = 3, t_range: tuple[int, int] = (6, 10),
                  noise_sigma: float = 0.05):
    """Smallest dataset that still satisfies the split composition."""
    schema = MetricSchema.desk(n_base=n_base)
    return gen_dataset(n_apps, runs_per_app, 6 / 11, t_range, seed,
                       schema=schema,
                       interference=InterferenceConfig(noise_sigma=noise_sigma))
