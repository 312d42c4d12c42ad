"""Shared test fixtures and independent oracles.

The finite-difference helper and the Euclidean nearest-class-mean oracle
live here, implemented without touching the code paths they check.
"""

import numpy as np
import pytest


def fd_gradient(loss_fn, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``array`` entries.

    Perturbs the live array in place and restores it, so ``loss_fn`` must
    read from ``array`` on every call.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        lp = loss_fn()
        flat[idx] = orig - step
        lm = loss_fn()
        flat[idx] = orig
        gflat[idx] = (lp - lm) / (2.0 * step)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-10:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / denom)


class EuclideanNcm:
    """Nearest-class-mean classifier in raw input space (oracle)."""

    def __init__(self):
        self.means = {}

    def fit(self, x, y):
        for c in np.unique(y):
            self.means[int(c)] = x[y == c].mean(axis=0)
        return self

    def predict(self, x):
        classes = sorted(self.means)
        centers = np.stack([self.means[c] for c in classes])
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return np.array(classes)[np.argmin(d, axis=1)]


@pytest.fixture
def ncm_oracle():
    return EuclideanNcm


def tiny_run_config(**overrides):
    """A fast 3-task synthetic config; override sections as needed."""
    cfg = {
        "seed": 9,
        "dataset": {
            "kind": "synthetic",
            "tasks": 3,
            "classes_per_task": 2,
            "n_train": 40,
            "n_test": 10,
            "input_dim": 8,
            "class_sep": 5.0,
        },
        "model": {"blocks": 2, "pretrain": None},
        "train": {"epochs": 3, "batch_size": 16, "rank": 2},
        "tap": {"samples_per_class": 32, "epochs": 3},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in cfg:
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg
