"""Geodesic training loop, weighted sample generation and online updates."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .distributions import Distribution
from .flow import FlowConfig, forward_flow, inverse_flow, normalize_weights
from .loss import grid_integral, phihat_series, total_loss
from .metrics import ess
from .optim import AdamState, adam_step, clip_by_norm
from .potential import PARAM_NAMES, Potential, flatten, init_params, unflatten

log = logging.getLogger(__name__)

METRIC_KEYS = ("iter", "J_KL", "J_SWFR", "J_R", "total", "wall_ms", "n_eff")


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 1000
    n: int = 2048
    batch_size: int | None = None  # None: full batch
    n_inverse: int | None = None  # None: same as the batch size
    alpha: float = 10.0
    T: float = 1.0
    nt: int = 8
    gamma1: float = 0.01
    gamma2: float = 0.01
    width: int = 32
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    full_graph_inverse: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.batch_size is not None and not (1 <= self.batch_size <= self.n):
            raise ValueError("batch_size must be in [1, n]")
        FlowConfig(self.alpha, self.T, self.nt)

    @property
    def flow(self) -> FlowConfig:
        return FlowConfig(self.alpha, self.T, self.nt)

    def to_dict(self) -> dict:
        out = asdict(self)
        if math.isinf(self.alpha):
            out["alpha"] = "inf"
        return out

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        if data.get("alpha") == "inf":
            data["alpha"] = math.inf
        return cls(**data)


def evaluate_objective(
    params: dict,
    x: np.ndarray,
    w0: np.ndarray,
    target: Distribution,
    cfg: FlowConfig,
    z_hat: np.ndarray,
    gamma1: float,
    gamma2: float,
    full_graph_inverse: bool = False,
):
    """Build J on a fresh tape; returns (tape, leaves, terms, forward batch, inverse batch).

    ``params`` holds plain arrays; each becomes a named leaf.
    """
    tape = ad.Tape()
    leaves = {k: tape.leaf(params[k], name=k) for k in PARAM_NAMES}
    terms, fwd, inv = objective_on_tape(leaves, x, w0, target, cfg, z_hat, gamma1, gamma2, full_graph_inverse)
    return tape, leaves, terms, fwd, inv


def objective_on_tape(leaves, x, w0, target, cfg, z_hat, gamma1, gamma2, full_graph_inverse=False):
    pot = Potential.from_params(leaves)
    fwd = forward_flow(x, w0, pot, cfg)
    if cfg.pure_transport:
        integral, inv = 0.0, None
    elif full_graph_inverse:
        inv = inverse_flow(z_hat, pot, cfg)
        integral = grid_integral(inv.phihat_vars, cfg.h)
    else:
        pot_np = Potential.from_params({k: v.value for k, v in leaves.items()})
        inv = inverse_flow(z_hat, pot_np, cfg)
        integral = grid_integral(phihat_series(pot, inv, cfg), cfg.h)
    terms = total_loss(fwd, integral, target, cfg, gamma1, gamma2)
    return terms, fwd, inv


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]  # best total loss
    last_params: dict[str, np.ndarray]
    history: list[dict]
    best_iter: int
    adam: AdamState


class GeodesicTrainer:
    """Stateful ADAM loop over the potential parameters.

    State (parameters, optimiser moments, RNG, iteration counter and best
    iterate) round-trips through :meth:`checkpoint` / :meth:`from_checkpoint`
    so a resumed run continues bit-for-bit.
    """

    def __init__(
        self,
        x: np.ndarray,
        w0: np.ndarray | None,
        target: Distribution,
        cfg: TrainConfig,
        params: dict[str, np.ndarray] | None = None,
        adam: AdamState | None = None,
    ):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 0:
            raise ValueError("no training particles")
        if x.shape[1] != target.dim:
            raise ValueError(f"source dimension {x.shape[1]} does not match target dimension {target.dim}")
        self.x = x
        self.w0 = normalize_weights(np.ones(x.shape[0]) if w0 is None else w0)[:, 0]
        self.target = target
        self.cfg = cfg
        self.d = x.shape[1]
        if params is None:
            params = init_params(self.d, cfg.width, cfg.seed)
        self.theta = flatten(params)
        self.adam = AdamState.zeros(self.theta.size, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        if adam is not None:
            # keep the moment estimates, take the step settings from cfg
            if adam.m.shape != self.theta.shape:
                raise ValueError("optimizer state does not match the parameter count")
            self.adam = AdamState(adam.m.copy(), adam.v.copy(), adam.k, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.history: list[dict] = []
        self.best_total = math.inf
        self.best_theta = self.theta.copy()
        self.best_iter = -1
        self.meta: dict = {}  # caller-owned, echoed into checkpoints

    @property
    def params(self) -> dict[str, np.ndarray]:
        return unflatten(self.theta, self.d, self.cfg.width)

    def _batch(self):
        bs = self.cfg.batch_size
        if bs is None or bs == self.x.shape[0]:
            return self.x, self.w0
        idx = self.rng.choice(self.x.shape[0], size=bs, replace=False)
        return self.x[idx], self.w0[idx]

    def step(self) -> dict:
        start = time.perf_counter()
        cfg = self.cfg
        xb, wb = self._batch()
        n_inv = cfg.n_inverse or xb.shape[0]
        z_hat, _ = self.target.sample(n_inv, self.rng)
        tape, leaves, terms, fwd, _ = evaluate_objective(
            self.params, xb, wb, self.target, cfg.flow, z_hat, cfg.gamma1, cfg.gamma2, cfg.full_graph_inverse
        )
        values = terms.values()
        grads = tape.backward(terms.total)
        grad = clip_by_norm(flatten(grads), cfg.clip_norm)
        if values["total"] < self.best_total:
            self.best_total = values["total"]
            self.best_theta = self.theta.copy()
            self.best_iter = self.iteration
        self.theta, self.adam = adam_step(self.adam, self.theta, grad)
        record = {"iter": self.iteration, **values}
        record["wall_ms"] = round((time.perf_counter() - start) * 1e3, 3) if cfg.record_wall_time else None
        record["n_eff"] = ess(fwd.weights_T)
        self.history.append(record)
        self.iteration += 1
        return record

    def run(self, iterations: int | None = None, callback: Callable[[dict], None] | None = None) -> TrainResult:
        target_iter = self.cfg.iterations if iterations is None else self.iteration + iterations
        while self.iteration < target_iter:
            record = self.step()
            if callback is not None:
                callback(record)
        return self.result()

    def result(self) -> TrainResult:
        best = self.best_theta if self.best_iter >= 0 else self.theta
        return TrainResult(
            params=unflatten(best, self.d, self.cfg.width),
            last_params=self.params,
            history=list(self.history),
            best_iter=self.best_iter,
            adam=self.adam,
        )

    # -- persistence -------------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "format": "swfr-flow-checkpoint/1",
            "iteration": self.iteration,
            "d": self.d,
            "config": self.cfg.to_dict(),
            "params": {k: v.tolist() for k, v in self.params.items()},
            "best_params": {k: v.tolist() for k, v in unflatten(self.best_theta, self.d, self.cfg.width).items()},
            "best_total": self.best_total if math.isfinite(self.best_total) else None,
            "best_iter": self.best_iter,
            "adam": self.adam.to_dict(),
            "rng": self.rng.bit_generator.state,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.checkpoint()))

    @classmethod
    def from_checkpoint(cls, data: dict, x, w0, target: Distribution) -> GeodesicTrainer:
        cfg = TrainConfig.from_dict(data["config"])
        params = {k: np.asarray(v, dtype=float) for k, v in data["params"].items()}
        trainer = cls(x, w0, target, cfg, params=params)
        trainer.iteration = int(data["iteration"])
        trainer.adam = AdamState.from_dict(data["adam"])
        trainer.rng.bit_generator.state = data["rng"]
        best = {k: np.asarray(v, dtype=float) for k, v in data["best_params"].items()}
        trainer.best_theta = flatten(best)
        trainer.best_total = math.inf if data["best_total"] is None else float(data["best_total"])
        trainer.best_iter = int(data["best_iter"])
        trainer.meta = dict(data.get("meta", {}))
        return trainer


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Best parameters and the echoed training config from a checkpoint file."""
    data = json.loads(Path(path).read_text())
    params = {k: np.asarray(v, dtype=float) for k, v in data["best_params"].items()}
    return params, data["config"]


def train_geodesic(
    x: np.ndarray,
    w0: np.ndarray | None,
    target: Distribution,
    cfg: TrainConfig,
    params: dict[str, np.ndarray] | None = None,
    callback: Callable[[dict], None] | None = None,
    adam: AdamState | None = None,
) -> TrainResult:
    """Fit the potential so the weighted flow carries (x, w0) onto ``target``.

    ``params`` and ``adam`` warm-start the parameters and the optimizer moments.
    """
    trainer = GeodesicTrainer(x, w0, target, cfg, params=params, adam=adam)
    return trainer.run(callback=callback)


def generate_weighted_samples(
    params: dict[str, np.ndarray],
    count: int,
    target: Distribution,
    cfg: FlowConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Push target draws back through the inverse flow; weights have mean one."""
    if count < 1:
        raise ValueError("count must be >= 1")
    z_hat, _ = target.sample(count, rng)
    inv = inverse_flow(z_hat, params, cfg)
    w = inv.weights_T
    return inv.positions_T, w / w.mean()


def online_update(
    params: dict[str, np.ndarray],
    log_likelihood: Callable[[np.ndarray], np.ndarray],
    target: Distribution,
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_samples: int | None = None,
    ess_floor: float = 0.1,
    adam: AdamState | None = None,
) -> TrainResult:
    """Reweight samples of the current model by new-window likelihoods and retrain.

    ``log_likelihood`` maps positions ``(n, d)`` to log-likelihoods of the new
    observation block. Training warm-starts from ``params``.
    """
    n = n_samples or cfg.n
    x, w = generate_weighted_samples(params, n, target, cfg.flow, rng)
    logw = np.log(w) + np.asarray(log_likelihood(x), dtype=float).ravel()
    if not np.isfinite(logw).any():
        raise FloatingPointError("all likelihoods underflow; effective sample size collapsed")
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    w_new = np.exp(logw - logw.max())
    if w_new.sum() == 0 or not np.isfinite(w_new).all():
        raise FloatingPointError("degenerate weights after reweighting")
    w_new = w_new / w_new.mean()
    n_eff = ess(w_new)
    if n_eff < ess_floor * n:
        log.warning("effective sample size %.1f below %.0f%% of %d", n_eff, 100 * ess_floor, n)
    keep = w_new > 0
    return train_geodesic(x[keep], w_new[keep], target, cfg, params=params, adam=adam)
