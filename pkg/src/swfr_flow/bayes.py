"""Bernoulli-equation inverse problem: forward model, observations, likelihood and oracles.

The model is dv/dt = v - v^3 with v(0) = x0; noisy observations of v at
t = n * dt are used to infer x0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .distributions import StdNormal
from .metrics import ess, weighted_mean_std, weighted_w1
from .trainer import TrainConfig, TrainResult, generate_weighted_samples, online_update, train_geodesic

LOG_2PI = math.log(2.0 * math.pi)


def bernoulli_solve(x, t):
    """Closed-form solution G(x, t) = x (x^2 + (1 - x^2) e^{-2t})^{-1/2}."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return x / np.sqrt(x * x + (1.0 - x * x) * np.exp(-2.0 * t))


@dataclass(frozen=True)
class BernoulliModel:
    x_true: float = 0.2
    sigma: float = 0.4
    dt: float = 1.0
    n_obs: int = 50
    window: int = 5  # observations per online update

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_obs < 0 or self.window < 1:
            raise ValueError("n_obs must be >= 0 and window >= 1")

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.n_obs + 1)


@dataclass(frozen=True)
class ObservationSeries:
    times: np.ndarray
    values: np.ndarray
    sigma: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.shape != values.shape:
            raise ValueError("times and values must have the same length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size

    def windows(self, size: int) -> list[slice]:
        """Consecutive blocks of ``size`` observations; the last may be shorter."""
        if size < 1:
            raise ValueError("window size must be >= 1")
        return [slice(k, min(k + size, len(self))) for k in range(0, len(self), size)]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "D"])
            for t, v in zip(self.times, self.values):
                writer.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path, sigma: float) -> ObservationSeries:
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if header != ["t", "D"]:
                raise ValueError(f"{path}: header must be t,D, got {header}")
            rows = []
            for row_no, row in enumerate(reader, start=1):
                if not row:
                    continue
                if len(row) != 2:
                    raise ValueError(f"{path}: row {row_no} has {len(row)} fields, expected 2")
                rows.append((float(row[0]), float(row[1])))
        arr = np.array(rows, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1], sigma)


def simulate_observations(model: BernoulliModel, seed: int) -> ObservationSeries:
    rng = np.random.default_rng(seed)
    t = model.times
    clean = bernoulli_solve(model.x_true, t)
    return ObservationSeries(t, clean + model.sigma * rng.standard_normal(t.size), model.sigma)


def log_likelihood(x0, series: ObservationSeries, window: slice | None = None) -> np.ndarray:
    """Gaussian log-likelihood of the observations in ``window`` for each x0.

    Returns an array shaped like ``x0`` (a trailing axis of length one, as in
    an ``(n, 1)`` particle array, is dropped). Empty windows give zero.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2 and x0.shape[1] == 1:
        x0 = x0[:, 0]
    sl = slice(None) if window is None else window
    t, d = series.times[sl], series.values[sl]
    out = np.zeros(x0.shape)
    if t.size == 0:
        return out
    if series.sigma == 0:
        raise ValueError("noise-free observations have no Gaussian likelihood")
    s2 = series.sigma**2
    const = -0.5 * math.log(2.0 * math.pi * s2)
    # accumulate observation by observation in a fixed order
    for tk, dk in zip(t, d):
        r = dk - bernoulli_solve(x0, tk)
        out = out + (const - r * r / (2.0 * s2))
    return out


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.5
    std: float = 1.0

    def sample(self, count: int, rng: np.random.Generator, stratified: bool = False) -> np.ndarray:
        """Prior draws; ``stratified`` puts one uniform draw in each of ``count`` quantile bins."""
        if stratified:
            u = (np.arange(count) + rng.uniform(size=count)) / count
            return self.mean + self.std * norm.ppf(u)
        return self.mean + self.std * rng.standard_normal(count)

    def log_density(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - 0.5 * LOG_2PI


@dataclass
class PosteriorSummary:
    samples: np.ndarray
    weights: np.ndarray  # sum to one
    mean: float
    var: float
    ess: float

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


class OracleDegenerate(RuntimeError):
    pass


def self_normalized_weights(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def posterior_oracle(
    prior: GaussianPrior,
    series: ObservationSeries,
    count: int = 1_000_000,
    seed: int = 0,
    min_ess: float = 100.0,
) -> PosteriorSummary:
    """Self-normalized importance sampling from the prior."""
    if count < 10_000:
        raise ValueError("the oracle needs at least 10^4 samples")
    x = prior.sample(count, np.random.default_rng(seed))
    w = self_normalized_weights(log_likelihood(x, series))
    n_eff = ess(w)
    if n_eff < min_ess:
        raise OracleDegenerate(f"importance-sampling ESS {n_eff:.1f} below {min_ess}; raise the sample count")
    mean = float(w @ x)
    var = float(w @ (x - mean) ** 2)
    return PosteriorSummary(x, w, mean, var, n_eff)


def grid_posterior(
    prior: GaussianPrior,
    series: ObservationSeries,
    nodes: int = 10_000,
    lo: float | None = None,
    hi: float | None = None,
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Trapezoid quadrature of the unnormalized posterior; returns (grid, density, mean, var)."""
    lo = prior.mean - 8.0 * prior.std if lo is None else lo
    hi = prior.mean + 8.0 * prior.std if hi is None else hi
    x = np.linspace(lo, hi, nodes)
    logp = prior.log_density(x) + log_likelihood(x, series)
    p = np.exp(logp - logp.max())
    z = np.trapezoid(p, x)
    p = p / z
    mean = float(np.trapezoid(x * p, x))
    var = float(np.trapezoid((x - mean) ** 2 * p, x))
    return x, p, mean, var


def weighted_prior_samples(
    prior: GaussianPrior,
    series: ObservationSeries,
    count: int,
    rng: np.random.Generator,
    window: slice | None = None,
    stratified: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Prior draws with likelihood weights rescaled to mean one: the weighted source measure."""
    x = prior.sample(count, rng, stratified=stratified)
    w = self_normalized_weights(log_likelihood(x, series, window)) * count
    return x.reshape(-1, 1), w


# -- experiment drivers -------------------------------------------------------


@dataclass
class PosteriorComparison:
    mean: float
    std: float
    oracle_mean: float
    oracle_std: float
    w1: float
    n_eff: float

    @property
    def mean_error(self) -> float:
        return abs(self.mean - self.oracle_mean)

    @property
    def std_error(self) -> float:
        return abs(self.std - self.oracle_std)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "oracle_mean": self.oracle_mean,
            "oracle_std": self.oracle_std,
            "mean_error": self.mean_error,
            "std_error": self.std_error,
            "w1": self.w1,
            "n_eff": self.n_eff,
        }


def compare_to_oracle(x, w, oracle: PosteriorSummary) -> PosteriorComparison:
    x = np.ravel(x)
    mean, std = weighted_mean_std(x, w)
    return PosteriorComparison(
        mean, std, oracle.mean, oracle.std, weighted_w1(x, w, oracle.samples, oracle.weights), ess(w)
    )


@dataclass
class BayesRun:
    params: dict
    samples: np.ndarray  # generated positions (N, 1)
    weights: np.ndarray  # mean one
    results: list[TrainResult]
    window_ends: list[int]  # observations consumed after each training stage


def run_batch(
    series: ObservationSeries,
    prior: GaussianPrior,
    cfg: TrainConfig,
    n_generate: int,
    seed: int = 0,
    stratified: bool = True,
) -> BayesRun:
    """Train on likelihood-weighted prior draws once, then generate with the inverse flow."""
    rng = np.random.default_rng(seed)
    x, w = weighted_prior_samples(prior, series, cfg.n, rng, stratified=stratified)
    target = StdNormal(1)
    result = train_geodesic(x, w, target, cfg)
    xs, ws = generate_weighted_samples(result.params, n_generate, target, cfg.flow, rng)
    return BayesRun(result.params, xs, ws, [result], [len(series)])


def run_online(
    series: ObservationSeries,
    prior: GaussianPrior,
    cfg: TrainConfig,
    window: int,
    n_generate: int,
    seed: int = 0,
    update_cfg: TrainConfig | None = None,
    stratified: bool = True,
    callback=None,
) -> BayesRun:
    """Sequential updates: the first window trains from weighted prior draws, later ones reweight model samples.

    ``update_cfg`` sets the (shorter) warm-started budget of each later
    window; ``callback(k, run_so_far)`` fires after every window.
    """
    rng = np.random.default_rng(seed)
    target = StdNormal(1)
    blocks = series.windows(window)
    if not blocks:
        raise ValueError("online mode needs at least one observation")
    update_cfg = update_cfg or cfg
    x, w = weighted_prior_samples(prior, series, cfg.n, rng, window=blocks[0], stratified=stratified)
    results = [train_geodesic(x, w, target, cfg)]
    ends = [blocks[0].stop]
    params = results[0].params
    if callback is not None:
        callback(0, BayesRun(params, x, w, results, ends))
    for k, block in enumerate(blocks[1:], start=1):
        res = online_update(
            params, lambda pts, b=block: log_likelihood(pts, series, b), target, update_cfg, rng, adam=results[-1].adam
        )
        params = res.params
        results.append(res)
        ends.append(block.stop)
        if callback is not None:
            callback(k, BayesRun(params, x, w, results, ends))
    xs, ws = generate_weighted_samples(params, n_generate, target, cfg.flow, rng)
    return BayesRun(params, xs, ws, results, ends)


def accumulated_log_likelihood(x0, series: ObservationSeries, window: int) -> np.ndarray:
    """Sum of per-window log-likelihoods, in window order."""
    total = np.zeros(np.shape(np.ravel(x0)))
    for block in series.windows(window):
        total = total + log_likelihood(x0, series, block)
    return total
