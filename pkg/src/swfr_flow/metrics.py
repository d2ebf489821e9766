"""Weighted-sample diagnostics: ESS, weighted KS and 1-Wasserstein distances."""

from __future__ import annotations

import numpy as np
from scipy.stats import wasserstein_distance


def ess(w) -> float:
    """(sum w)^2 / sum w^2."""
    w = np.asarray(w, dtype=float).ravel()
    return float(w.sum() ** 2 / np.sum(w * w))


def weighted_mean_std(x, w) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    w = w / w.sum()
    mu = float(w @ x)
    return mu, float(np.sqrt(w @ (x - mu) ** 2))


def _weighted_ecdf(x, w):
    x = np.asarray(x, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    return xs, np.cumsum(ws) / ws.sum()


def weighted_ks(x, w, cdf) -> float:
    """sup |F_w - F| between a weighted empirical CDF and a reference CDF."""
    xs, F = _weighted_ecdf(x, w)
    ref = cdf(xs)
    before = np.concatenate([[0.0], F[:-1]])
    return float(max(np.max(np.abs(F - ref)), np.max(np.abs(before - ref))))


def weighted_ks_2samp(x, wx, y, wy) -> float:
    """sup |F_x - F_y| between two weighted empirical CDFs."""
    xs, Fx = _weighted_ecdf(x, wx)
    ys, Fy = _weighted_ecdf(y, wy)
    grid = np.union1d(xs, ys)
    fx = np.concatenate([[0.0], Fx])[np.searchsorted(xs, grid, side="right")]
    fy = np.concatenate([[0.0], Fy])[np.searchsorted(ys, grid, side="right")]
    return float(np.max(np.abs(fx - fy)))


def weighted_w1(x, wx, y, wy) -> float:
    return float(
        wasserstein_distance(np.ravel(x), np.ravel(y), np.ravel(wx), np.ravel(wy))
    )
