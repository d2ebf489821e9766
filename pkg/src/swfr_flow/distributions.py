"""Reference densities, samplers and weighted dataset ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

LOG_2PI = math.log(2.0 * math.pi)


class DensityUnavailable(TypeError):
    """Raised when a sampler-only distribution is asked for its density."""


class Distribution:
    dim: int
    has_density = True

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(points, weights)``; weights have mean one."""
        raise NotImplementedError

    def log_density(self, x: np.ndarray) -> np.ndarray:
        raise DensityUnavailable(f"{type(self).__name__} has no tractable density")

    def score(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the log-density, one row per point."""
        raise DensityUnavailable(f"{type(self).__name__} has no tractable density")

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if self.dim == 1 else x.reshape(1, -1)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {x.shape[1]}")
        return x


@dataclass
class StdNormal(Distribution):
    dim: int = 1

    def sample(self, count, rng):
        _check_count(count)
        return rng.standard_normal((count, self.dim)), np.ones(count)

    def log_density(self, x):
        x = self._check(x)
        return -0.5 * np.sum(x * x, axis=1) - 0.5 * self.dim * LOG_2PI

    def score(self, x):
        return -self._check(x)

    def cdf(self, x):
        if self.dim != 1:
            raise ValueError("cdf is only defined for d=1")
        return norm.cdf(np.asarray(x, dtype=float))


@dataclass
class GaussianMixture(Distribution):
    """Isotropic Gaussian mixture: component weights, means ``(K, d)``, variances ``(K,)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        means = np.asarray(self.means, dtype=float)
        self.means = means.reshape(-1, 1) if means.ndim == 1 else means
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.size != k:
            raise ValueError("weights, means and variances must have one entry per component")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to one")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")
        self.dim = self.means.shape[1]

    def sample(self, count, rng):
        _check_count(count)
        comp = rng.choice(self.weights.size, size=count, p=self.weights)
        noise = rng.standard_normal((count, self.dim))
        x = self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise
        return x, np.ones(count)

    def _component_logpdf(self, x):
        diff = x[:, None, :] - self.means[None, :, :]  # (n, K, d)
        sq = np.sum(diff * diff, axis=2)
        return (
            np.log(self.weights)[None, :]
            - 0.5 * sq / self.variances[None, :]
            - 0.5 * self.dim * (LOG_2PI + np.log(self.variances))[None, :]
        ), diff

    def log_density(self, x):
        x = self._check(x)
        comp, _ = self._component_logpdf(x)
        return logsumexp(comp, axis=1)

    def score(self, x):
        x = self._check(x)
        comp, diff = self._component_logpdf(x)
        resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
        return -np.einsum("nk,nkd->nd", resp / self.variances[None, :], diff)

    def cdf(self, x):
        if self.dim != 1:
            raise ValueError("cdf is only defined for d=1")
        x = np.asarray(x, dtype=float)[..., None]
        sd = np.sqrt(self.variances)
        return np.sum(self.weights * norm.cdf((x - self.means[:, 0]) / sd), axis=-1)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


def normal_1d(mean: float, std: float) -> GaussianMixture:
    return GaussianMixture([1.0], [[mean]], [std**2])


def bimodal_1d() -> GaussianMixture:
    """(1/3) N(-3, 1) + (2/3) N(3, 1)."""
    return GaussianMixture([1 / 3, 2 / 3], [[-3.0], [3.0]], [1.0, 1.0])


def eight_gaussians(radius: float = 4.0, std: float = 0.5) -> GaussianMixture:
    angles = np.arange(8) * (np.pi / 4)
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(8, 1 / 8), means, np.full(8, std**2))


@dataclass
class Moons(Distribution):
    """Two interleaved half circles with Gaussian noise, centred at the origin."""

    noise: float = 0.1
    dim: int = 2
    has_density = False

    def sample(self, count, rng):
        _check_count(count)
        n_outer = count // 2
        n_inner = count - n_outer
        a = rng.uniform(0.0, np.pi, size=n_outer)
        b = rng.uniform(0.0, np.pi, size=n_inner)
        outer = np.stack([np.cos(a), np.sin(a)], axis=1)
        inner = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
        x = np.concatenate([outer, inner]) - np.array([0.5, 0.25])
        x = x + self.noise * rng.standard_normal(x.shape)
        return x[rng.permutation(count)], np.ones(count)


@dataclass
class EmpiricalWeighted(Distribution):
    """A fixed weighted point set; sampling resamples rows uniformly."""

    points: np.ndarray
    weights: np.ndarray
    dim: int = field(init=False)
    has_density = False

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.dim = self.points.shape[1]

    @classmethod
    def from_csv(cls, path) -> EmpiricalWeighted:
        x, w = load_weighted_csv(path)
        return cls(x, w)

    def sample(self, count, rng):
        _check_count(count)
        if count == self.points.shape[0]:
            return self.points.copy(), self.weights / self.weights.mean()
        idx = rng.integers(0, self.points.shape[0], size=count)
        w = self.weights[idx]
        return self.points[idx], w / w.mean()


def _check_count(count: int) -> None:
    if count < 1:
        raise ValueError("count must be >= 1")


def sample(spec: Distribution, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    return spec.sample(count, np.random.default_rng(seed))


def log_density(spec: Distribution, x) -> np.ndarray:
    return spec.log_density(x)


def load_weighted_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read columns ``x0..x{d-1}, w``; weights are rescaled to mean one."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"x{j}" for j in range(d)] + ["w"]
        if d < 1 or header != expected:
            raise ValueError(f"{path}: header must be {','.join(expected) if d >= 1 else 'x0,...,w'}, got {header}")
        xs, ws = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}: row {row_no} has {len(row)} fields, expected {d + 1}")
            vals = [float(v) for v in row]
            w = vals[-1]
            if not (math.isfinite(w) and w > 0):
                raise ValueError(f"{path}: row {row_no} has invalid weight {row[-1]!r}")
            xs.append(vals[:-1])
            ws.append(w)
    if not xs:
        raise ValueError(f"{path}: no data rows")
    w = np.array(ws)
    return np.array(xs), w / w.mean()


def write_weighted_csv(path, x, w) -> None:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.asarray(w, dtype=float).ravel()
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(x.shape[1])] + ["w"])
        for row, wi in zip(x, w):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(wi))])


def from_spec(spec: dict) -> Distribution:
    """Build a distribution from a plain mapping (see the config reference)."""
    kind = spec["kind"]
    if kind == "std_normal":
        return StdNormal(int(spec.get("dim", 1)))
    if kind == "normal":
        return normal_1d(float(spec["mean"]), float(spec["std"]))
    if kind == "mixture":
        return GaussianMixture(spec["weights"], spec["means"], spec["variances"])
    if kind == "bimodal_1d":
        return bimodal_1d()
    if kind == "eight_gaussians":
        return eight_gaussians(float(spec.get("radius", 4.0)), float(spec.get("std", 0.5)))
    if kind == "moons":
        return Moons(float(spec.get("noise", 0.1)))
    if kind == "empirical":
        return EmpiricalWeighted.from_csv(spec["path"])
    raise ValueError(f"unknown distribution kind {kind!r}")
