"""Training objective J = J_KL + gamma1 * J_SWFR + gamma2 * J_R.

All expectations over the source measure are initial-weight-weighted batch
means, so weighted source samples enter exactly as the integral against
w(x, 0) p(x) prescribes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .distributions import Distribution
from .flow import FlowConfig, InverseBatch, TrajectoryBatch
from .potential import Potential


@dataclass
class LossTerms:
    J_KL: object
    J_SWFR: object
    J_R: object
    total: object
    gamma1: float
    gamma2: float

    def values(self) -> dict[str, float]:
        return {
            "J_KL": float(ad.value_of(self.J_KL).item()),
            "J_SWFR": float(ad.value_of(self.J_SWFR).item()),
            "J_R": float(ad.value_of(self.J_R).item()),
            "total": float(ad.value_of(self.total).item()),
        }


def log_target(target: Distribution, z):
    """log rho_1 at each row of ``z`` as an ``(n, 1)`` column, differentiable in ``z``."""

    def fn(x):
        out = target.log_density(x).reshape(-1, 1)
        bad = np.flatnonzero(~np.isfinite(out[:, 0]))
        if bad.size:
            raise ad.NonFiniteError(f"log target density is not finite for particle {int(bad[0])}")
        return out

    def vjp(g, x):
        return g * target.score(x)

    return ad.custom(z, fn, vjp, name="log_target")


def trapezoid(values, h: float):
    """Composite trapezoid of a list of ``(1, 1)`` values on a uniform grid."""
    acc = 0.5 * (values[0] + values[-1])
    for v in values[1:-1]:
        acc = acc + v
    return ad.scale(acc, h) if isinstance(acc, ad.Var) else acc * h


def grid_integral(values, h: float):
    """Composite Simpson on an even number of intervals, trapezoid otherwise.

    Simpson matches what RK4 does to a pure quadrature, so the phihat integral
    and the per-particle integrals carried by the flow share one order.
    """
    k = len(values) - 1
    if k < 2 or k % 2:
        return trapezoid(values, h)
    acc = values[0] + values[-1]
    for j in range(1, k):
        acc = acc + (4.0 if j % 2 else 2.0) * values[j]
    return ad.scale(acc, h / 3.0) if isinstance(acc, ad.Var) else acc * (h / 3.0)


def phihat_series(pot: Potential, inv: InverseBatch, cfg: FlowConfig) -> list:
    """phihat on the grid with the inverse trajectories held fixed.

    Gradients reach the potential only through its evaluations at the stored
    (constant) positions and weights.
    """
    out = []
    for k, tau in enumerate(inv.times):
        w = inv.weights[k].reshape(-1, 1)
        out.append(ad.mean(w * pot.phi(inv.positions[k], cfg.T - tau)))
    return out


def kl_term(fwd: TrajectoryBatch, phihat_integral, target: Distribution, cfg: FlowConfig):
    """KL(rho_0 || inverse-flow density) with the constant E[log rho_0] dropped.

    The inverse flow raises log-density by (1/alpha) * int (phi - phihat), so
    that integral enters with a minus sign.
    """
    per_particle = -fwd.logdet - log_target(target, fwd.z)
    if cfg.inv_alpha:
        per_particle = per_particle - cfg.inv_alpha * fwd.int_phi
    out = ad.mean(fwd.w0 * per_particle)
    if cfg.inv_alpha:
        out = out + cfg.inv_alpha * phihat_integral
    return out


def swfr_term(fwd: TrajectoryBatch):
    return ad.mean(fwd.w0 * fwd.int_swfr)


def reg_term(fwd: TrajectoryBatch):
    return ad.mean(fwd.w0 * fwd.int_reg)


def total_loss(
    fwd: TrajectoryBatch,
    phihat_integral,
    target: Distribution,
    cfg: FlowConfig,
    gamma1: float = 0.01,
    gamma2: float = 0.01,
) -> LossTerms:
    if gamma1 < 0 or gamma2 < 0:
        raise ValueError("gamma1 and gamma2 must be nonnegative")
    j_kl = kl_term(fwd, phihat_integral, target, cfg)
    j_swfr = swfr_term(fwd)
    j_r = reg_term(fwd)
    total = j_kl + gamma1 * j_swfr + gamma2 * j_r
    if not np.isfinite(ad.value_of(total)).all():
        raise ad.NonFiniteError("total loss is not finite")
    return LossTerms(j_kl, j_swfr, j_r, total, gamma1, gamma2)
