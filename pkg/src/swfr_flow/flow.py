"""RK4 integration of the weighted particle systems.

Forward system, for particles started at x_i with weights w_i(0)::

    dz/dt = -grad phi(z, t)
    dw/dt = -(phi(z, t) - phibar(t)) w / alpha
    dl/dt = -tr hess phi(z, t)

Inverse system, for samples of the target::

    dx/dt = +grad phi(x, T - t)
    dw/dt = +(phi(x, T - t) - phihat(T - t)) w / alpha

Weights are carried as log-weights and shifted after every full step so
their batch mean is exactly one (the sum-to-n convention divided by n).
Inside a step the stage weights are left as they are, and phibar / phihat
divide by their mean.
The running cost integrals are part of the RK4 state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .potential import Potential


@dataclass(frozen=True)
class FlowConfig:
    alpha: float = 10.0
    T: float = 1.0
    nt: int = 8

    def __post_init__(self):
        if not (self.alpha > 0) or math.isnan(self.alpha):
            raise ValueError(f"alpha must be positive or inf, got {self.alpha}")
        if self.nt < 1:
            raise ValueError("nt must be >= 1")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError("T must be positive and finite")

    @property
    def pure_transport(self) -> bool:
        return math.isinf(self.alpha)

    @property
    def inv_alpha(self) -> float:
        return 0.0 if self.pure_transport else 1.0 / self.alpha

    @property
    def h(self) -> float:
        return self.T / self.nt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)


@dataclass
class TrajectoryBatch:
    """Endpoint state (tape variables or arrays) plus per-step snapshots."""

    times: np.ndarray
    w0: np.ndarray
    z: object
    log_w: object
    logdet: object
    int_phi: object
    int_swfr: object
    int_reg: object
    phibar: np.ndarray
    positions: np.ndarray  # (nt + 1, n, d)
    weights: np.ndarray  # (nt + 1, n)
    logdets: np.ndarray  # (nt + 1, n)

    @property
    def n(self) -> int:
        return self.w0.shape[0]

    @property
    def weights_T(self) -> np.ndarray:
        return self.weights[-1]


@dataclass
class InverseBatch:
    times: np.ndarray  # inverse time tau_k; potential is evaluated at T - tau_k
    x: object
    log_w: object
    phihat: np.ndarray  # phihat(T - tau_k), k = 0..nt
    phihat_vars: list = field(default_factory=list)
    positions: np.ndarray = None  # (nt + 1, N, d)
    weights: np.ndarray = None  # (nt + 1, N)
    logdets: np.ndarray = None

    @property
    def positions_T(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def weights_T(self) -> np.ndarray:
        return self.weights[-1]


def _as_potential(pot) -> Potential:
    return pot if isinstance(pot, Potential) else Potential.from_params(pot)


def normalize_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 1)
    if w.size == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    return w / w.mean()


def mean_potential(positions, weights, pot, t: float):
    """(1/n) sum_i w_i phi(z_i, t), with weights already mean-normalised."""
    pot = _as_potential(pot)
    positions = positions if isinstance(positions, ad.Var) else np.atleast_2d(np.asarray(positions, float))
    n = ad.value_of(positions).shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if n == 1:
        weights = np.ones((1, 1))
    if not isinstance(weights, ad.Var):
        weights = np.asarray(weights, dtype=float).reshape(-1, 1)
    return ad.mean(weights * pot.phi(positions, t))


def _weighted_mean(w, phi):
    # stage weights are provisional, so divide by their mean; equals mean(w * phi) at step nodes
    return ad.mean(w * phi) * ad.reciprocal(ad.mean(w))


def _renormalize(u):
    # shift so that mean(exp(u)) == 1
    return u - ad.log(ad.mean(ad.exp(u)))


def _rk(k1, k2, k3, k4, h):
    return ad.scale(k1 + 2.0 * (k2 + k3) + k4, h / 6.0)


def _check_state(step: int, *arrays):
    for a in arrays:
        if not np.isfinite(ad.value_of(a)).all():
            raise ad.NonFiniteError(f"non-finite particle state at step {step}")


def forward_flow(x, w0, pot, cfg: FlowConfig) -> TrajectoryBatch:
    """Integrate the forward particle system from t=0 to t=T."""
    pot = _as_potential(pot)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w0 = normalize_weights(np.ones(n) if w0 is None else w0)
    inv_a = cfg.inv_alpha
    h = cfg.h
    frozen = cfg.pure_transport

    inv_w0 = 1.0 / w0
    _, grad0 = pot.phi_grad(x, 0.0)
    grad0w0 = grad0 * w0

    def deriv(t, z, u):
        phi, grad, tr = pot.phi_grad_trace(z, t)
        sq = ad.sqnorm(grad, axis=1)
        if frozen:
            w = w0
            d_swfr = 0.5 * sq
            du = None
            phibar = ad.mean(w0 * phi)
            d_reg = ad.sqnorm(grad * w0 - grad0w0, axis=1)
        else:
            w = ad.exp(u)
            ratio = w * inv_w0
            phibar = _weighted_mean(w, phi)
            dev = phi - phibar
            du = ad.scale(dev, -inv_a)
            d_swfr = 0.5 * (sq + inv_a * ad.square(dev)) * ratio
            d_reg = ad.sqnorm(grad * w - grad0w0, axis=1) * ratio
        return -grad, du, -tr, phi, d_swfr, d_reg, phibar

    z, u = x, np.log(w0)
    logdet = np.zeros((n, 1))
    i_phi = np.zeros((n, 1))
    i_swfr = np.zeros((n, 1))
    i_reg = np.zeros((n, 1))

    positions = [x.copy()]
    weights = [w0[:, 0].copy()]
    logdets = [np.zeros(n)]
    phibar = []
    times = cfg.times
    for k in range(cfg.nt):
        t = times[k]
        try:
            s1 = deriv(t, z, u)
            if frozen:
                s2 = deriv(t + h / 2, z + ad.scale(s1[0], h / 2), u)
                s3 = deriv(t + h / 2, z + ad.scale(s2[0], h / 2), u)
                s4 = deriv(t + h, z + ad.scale(s3[0], h), u)
            else:
                s2 = deriv(t + h / 2, z + ad.scale(s1[0], h / 2), u + ad.scale(s1[1], h / 2))
                s3 = deriv(t + h / 2, z + ad.scale(s2[0], h / 2), u + ad.scale(s2[1], h / 2))
                s4 = deriv(t + h, z + ad.scale(s3[0], h), u + ad.scale(s3[1], h))
            stages = (s1, s2, s3, s4)
            z = z + _rk(*(s[0] for s in stages), h)
            if not frozen:
                u = _renormalize(u + _rk(*(s[1] for s in stages), h))
            logdet = logdet + _rk(*(s[2] for s in stages), h)
            i_phi = i_phi + _rk(*(s[3] for s in stages), h)
            i_swfr = i_swfr + _rk(*(s[4] for s in stages), h)
            i_reg = i_reg + _rk(*(s[5] for s in stages), h)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"forward flow step {k}: {exc}") from None
        _check_state(k, z, u)
        phibar.append(ad.value_of(s1[6]).item())
        positions.append(np.array(ad.value_of(z)))
        weights.append(np.exp(ad.value_of(u))[:, 0] if not frozen else w0[:, 0].copy())
        logdets.append(np.array(ad.value_of(logdet))[:, 0])

    # phibar at T, for reporting only
    zT = positions[-1]
    pot_np = Potential.from_params({k: ad.value_of(v) for k, v in pot.params.items()})
    phibar.append(float(np.mean(weights[-1] * pot_np.phi(zT, cfg.T)[:, 0])))

    return TrajectoryBatch(
        times=times,
        w0=w0,
        z=z,
        log_w=u,
        logdet=logdet,
        int_phi=i_phi,
        int_swfr=i_swfr,
        int_reg=i_reg,
        phibar=np.array(phibar),
        positions=np.stack(positions),
        weights=np.stack(weights),
        logdets=np.stack(logdets),
    )


def inverse_flow(z_hat, pot, cfg: FlowConfig, w_init=None, track_logdet: bool = False) -> InverseBatch:
    """Integrate the inverse system from target samples back to t=0.

    Returns the endpoint positions and weights and the series
    ``phihat(T - tau_k)`` sampled at every grid point, each computed from
    the normalised weights at that point.
    """
    pot = _as_potential(pot)
    z_hat = np.atleast_2d(np.asarray(z_hat, dtype=float))
    N = z_hat.shape[0]
    if N == 0:
        raise ValueError("empty batch")
    inv_a = cfg.inv_alpha
    frozen = cfg.pure_transport
    h, T = cfg.h, cfg.T
    w_start = np.ones((N, 1)) if w_init is None else normalize_weights(w_init)

    def deriv(tau, x, u):
        if track_logdet:
            phi, grad, tr = pot.phi_grad_trace(x, T - tau)
        else:
            (phi, grad), tr = pot.phi_grad(x, T - tau), None
        w = w_start if frozen else ad.exp(u)
        phihat = ad.mean(w * phi) if frozen else _weighted_mean(w, phi)
        du = None if frozen else ad.scale(phi - phihat, inv_a)
        return grad, du, tr, phihat

    x, u = z_hat, np.log(w_start)
    logdet = np.zeros((N, 1))
    positions = [z_hat.copy()]
    weights = [w_start[:, 0].copy()]
    logdets = [np.zeros(N)]
    phihat_vars = []
    taus = cfg.times
    for k in range(cfg.nt):
        tau = taus[k]
        try:
            s1 = deriv(tau, x, u)
            if frozen:
                s2 = deriv(tau + h / 2, x + ad.scale(s1[0], h / 2), u)
                s3 = deriv(tau + h / 2, x + ad.scale(s2[0], h / 2), u)
                s4 = deriv(tau + h, x + ad.scale(s3[0], h), u)
            else:
                s2 = deriv(tau + h / 2, x + ad.scale(s1[0], h / 2), u + ad.scale(s1[1], h / 2))
                s3 = deriv(tau + h / 2, x + ad.scale(s2[0], h / 2), u + ad.scale(s2[1], h / 2))
                s4 = deriv(tau + h, x + ad.scale(s3[0], h), u + ad.scale(s3[1], h))
            stages = (s1, s2, s3, s4)
            x = x + _rk(*(s[0] for s in stages), h)
            if not frozen:
                u = _renormalize(u + _rk(*(s[1] for s in stages), h))
            if track_logdet:
                logdet = logdet + _rk(*(s[2] for s in stages), h)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"inverse flow step {k}: {exc}") from None
        _check_state(k, x, u)
        phihat_vars.append(s1[3])
        positions.append(np.array(ad.value_of(x)))
        weights.append(w_start[:, 0].copy() if frozen else np.exp(ad.value_of(u))[:, 0])
        logdets.append(np.array(ad.value_of(logdet))[:, 0])

    w_end = w_start if frozen else ad.exp(u)
    phihat_vars.append(ad.mean(w_end * pot.phi(x, T - taus[-1])))
    return InverseBatch(
        times=taus,
        x=x,
        log_w=u,
        phihat=np.array([ad.value_of(v).item() for v in phihat_vars]),
        phihat_vars=phihat_vars,
        positions=np.stack(positions),
        weights=np.stack(weights),
        logdets=np.stack(logdets),
    )


def round_trip(x, w0, pot, cfg: FlowConfig) -> tuple[float, float]:
    """Forward then inverse with the same potential; (position RMSE, weight RMSE)."""
    pot_np = _as_potential({k: ad.value_of(v) for k, v in _as_potential(pot).params.items()})
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w0 = normalize_weights(np.ones(x.shape[0]) if w0 is None else w0)
    fwd = forward_flow(x, w0, pot_np, cfg)
    inv = inverse_flow(fwd.positions[-1], pot_np, cfg, w_init=fwd.weights_T)
    pos_rmse = float(np.sqrt(np.mean(np.sum((inv.positions_T - x) ** 2, axis=1))))
    w_rec = inv.weights_T / inv.weights_T.mean()
    w_rmse = float(np.sqrt(np.mean((w_rec - w0[:, 0]) ** 2)))
    return pos_rmse, w_rmse


TRAJECTORY_COLUMNS = ("step", "t", "particle_id")


def trajectory_header(d: int) -> list[str]:
    return [*TRAJECTORY_COLUMNS, *(f"z{j}" for j in range(d)), "w", "l"]


def write_trajectory_csv(path, times, positions, weights, logdets, particles=None) -> None:
    """Dump per-step particle states; ``particles`` selects a subset of ids."""
    positions = np.asarray(positions)
    steps, n, d = positions.shape
    ids = range(n) if particles is None else particles
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trajectory_header(d))
        for k in range(steps):
            for i in ids:
                row = [k, f"{times[k]:.10g}", i]
                row += [f"{v:.10g}" for v in positions[k, i]]
                row += [f"{weights[k, i]:.10g}", f"{logdets[k, i]:.10g}"]
                writer.writerow(row)
