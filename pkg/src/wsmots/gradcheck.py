"""Central-difference checks of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crf import AffinityParams, crf_loss
from .tracking import triplet_loss
from .weak_labels import VOID, loc_loss

__all__ = ["numerical_gradient", "relative_error", "GradCheckResult", "run_gradcheck", "TOLERANCES"]

TOLERANCES = {"loc_loss": 1e-5, "crf_loss_dense": 1e-4, "crf_loss_fast": 1e-4, "triplet_loss": 1e-5}


def numerical_gradient(f, x, step=1e-6):
    """Central differences of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_error: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _corrupt(grad, rng, corrupt):
    if not corrupt:
        return grad
    return grad + 1e-2 * np.abs(grad).max() * rng.standard_normal(grad.shape)


def _loc_trial(rng, corrupt):
    size = int(rng.integers(4, 17))
    label = rng.choice(np.array([0, 1, VOID], dtype=np.uint8), size=(size, size), p=[0.4, 0.4, 0.2])
    label[0, 0] = 1
    pred = rng.uniform(0.05, 0.95, (size, size))
    _, grad = loc_loss(label, pred)
    num = numerical_gradient(lambda s: loc_loss(label, s)[0], pred)
    return relative_error(_corrupt(grad, rng, corrupt), num)


def _crf_trial(rng, corrupt, method):
    # each lattice evaluation costs milliseconds, so the fast path gets smaller grids
    size = int(rng.integers(6, 17 if method == "dense" else 11))
    image = rng.random((size, size, 3))
    fg = rng.uniform(0.01, 0.99, (size, size))
    masks = np.stack([fg, 1.0 - fg])
    params = AffinityParams(sigma_xy=3.0, sigma_rgb=0.3)
    _, grad = crf_loss(image, masks, params, method)
    num = numerical_gradient(lambda s: crf_loss(image, s, params, method)[0], masks, step=1e-4)
    return relative_error(_corrupt(grad, rng, corrupt), num)


def _triplet_trial(rng, corrupt):
    n = int(rng.integers(4, 13))
    dim = int(rng.integers(2, 9))
    ids = rng.integers(0, 3, n)
    ids[:2] = (0, 1)
    ids[2] = 0
    emb = rng.standard_normal((n, dim))
    margin = 0.2
    loss, grad = triplet_loss(emb, ids, margin)
    if loss == 0.0:
        # raise the margin until some hinge is active
        margin = 2.5
        loss, grad = triplet_loss(emb, ids, margin)
    num = numerical_gradient(lambda e: triplet_loss(e, ids, margin)[0], emb)
    return relative_error(_corrupt(grad, rng, corrupt), num)


def run_gradcheck(seed=0, trials=10, corrupt=False, include_fast=True):
    """Run every check ``trials`` times; return one result per loss."""
    rng = np.random.default_rng(seed)
    checks = {
        "loc_loss": lambda: _loc_trial(rng, corrupt),
        "crf_loss_dense": lambda: _crf_trial(rng, corrupt, "dense"),
        "triplet_loss": lambda: _triplet_trial(rng, corrupt),
    }
    if include_fast:
        checks["crf_loss_fast"] = lambda: _crf_trial(rng, corrupt, "fast")
    results = []
    for name, trial in checks.items():
        worst = max(trial() for _ in range(trials))
        results.append(GradCheckResult(name, worst, TOLERANCES[name], trials))
    return results
