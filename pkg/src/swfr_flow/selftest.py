"""Fast invariant suites behind ``swfr-flow selftest``.

Each check returns ``(ok, detail)``; :func:`run_all` runs them in order and
reports one line per check.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .bayes import BernoulliModel, bernoulli_solve, log_likelihood, simulate_observations
from .distributions import StdNormal, bimodal_1d
from .flow import FlowConfig, forward_flow, inverse_flow, mean_potential
from .optim import AdamState, adam_step
from .potential import Potential, grad_phi, init_params, random_params, trace_hessian, eval_phi
from .trainer import GeodesicTrainer, TrainConfig


def check_weights_positive_normalized():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        d = 1 + seed % 2
        params = random_params(d, 8, seed, scale=0.8)
        x = rng.standard_normal((16, d))
        fwd = forward_flow(x, rng.uniform(0.2, 3.0, 16), params, FlowConfig(alpha=0.5, nt=6))
        if not (fwd.weights > 0).all():
            return False, f"non-positive weight (seed {seed})"
        worst = max(worst, float(np.abs(fwd.weights.mean(axis=1) - 1.0).max()))
    return worst <= 1e-12, f"max |mean w - 1| = {worst:.2e}"


def check_identity_flow():
    x = np.random.default_rng(0).standard_normal((32, 2))
    fwd = forward_flow(x, None, init_params(2, 8, 0), FlowConfig(alpha=3.0, nt=4))
    moved = float(np.abs(fwd.positions - x).max())
    ints = max(float(np.abs(ad.value_of(v)).max()) for v in (fwd.int_phi, fwd.int_swfr, fwd.int_reg, fwd.logdet))
    wdev = float(np.abs(fwd.weights - 1.0).max())
    return moved == 0 and ints == 0 and wdev == 0, f"moved {moved}, integrals {ints}, weights {wdev}"


def check_sigma_tanh():
    x = np.linspace(-20, 20, 4001)
    h = 1e-5
    fd = (ad.sigma(x + h) - ad.sigma(x - h)) / (2 * h)
    err = float(np.abs(fd - np.tanh(x)).max())
    big = ad.sigma(np.array([[800.0, -800.0]]))
    ok = err <= 1e-7 and np.allclose(big, 800.0 + math.log1p(math.exp(-1600)))
    return ok, f"max |sigma' - tanh| = {err:.2e}"


def check_potential_derivatives():
    worst_g = worst_t = 0.0
    for d in (1, 2, 3):
        params = random_params(d, 8, d)
        s = np.random.default_rng(d).standard_normal((4, d + 1))
        g = grad_phi(s, params)
        tr = trace_hessian(s, params)
        for i in range(d + 1):
            e = np.zeros(d + 1)
            e[i] = 1e-5
            fd = (eval_phi(s + e, params) - eval_phi(s - e, params))[:, 0] / 2e-5
            worst_g = max(worst_g, float(np.max(np.abs(fd - g[:, i]) / (np.abs(fd) + np.abs(g[:, i]) + 1e-12))))
        h = 1e-4
        sd = np.zeros((4, 1))
        for i in range(d):
            e = np.zeros(d + 1)
            e[i] = h
            sd += eval_phi(s + e, params) - 2 * eval_phi(s, params) + eval_phi(s - e, params)
        sd /= h * h
        worst_t = max(worst_t, float(np.max(np.abs(sd - tr) / (np.abs(sd) + np.abs(tr) + 1e-12))))
    return worst_g <= 1e-6 and worst_t <= 1e-4, f"grad {worst_g:.2e}, trace {worst_t:.2e}"


def check_mean_potential():
    rng = np.random.default_rng(3)
    params = random_params(2, 8, 3)
    pot = Potential.from_params(params)
    x = rng.standard_normal((10, 2))
    w = rng.uniform(0.5, 1.5, 10)
    w = w / w.mean()
    got = float(np.ravel(mean_potential(x, w, pot, 0.4))[0])
    direct = float(np.mean(w * pot.phi(x, 0.4)[:, 0]))
    single = forward_flow(x[:1], None, params, FlowConfig(alpha=0.3, nt=4))
    ok = abs(got - direct) <= 1e-12 and float(np.abs(single.weights - 1.0).max()) == 0.0
    return ok, f"|phibar - direct| = {abs(got - direct):.1e}"


def check_autodiff_random_graphs():
    ops = [ad.tanh, ad.sigma, ad.exp, ad.square, lambda v: v * v + v]
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        chain = rng.integers(0, len(ops), size=4)
        mix = [rng.standard_normal((3, 3)) / 3.0 for _ in range(5)]

        def fn(tape, leaves, chain=chain, mix=mix):
            v = leaves["x"] @ mix[0]
            for k, m in zip(chain, mix[1:]):
                v = ops[k](v) @ m
            return ad.sum(ad.sum(v, axis=1), axis=0)

        worst = max(worst, ad.finite_diff_check(fn, {"x": rng.standard_normal((4, 3))}, step=1e-4))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_rk4_order():
    # phi = x^2 / 2: z(t) = x e^{-t}
    params = init_params(1, 4, 0)
    params["A"] = np.array([[1.0, 0.0]])
    errs = []
    for nt in (4, 8, 16):
        fwd = forward_flow(np.array([[1.0]]), None, params, FlowConfig(alpha=math.inf, nt=nt))
        errs.append(abs(fwd.positions[-1, 0, 0] - math.exp(-1.0)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    ok = bool(np.all(np.abs(orders - 4) <= 0.5)) and errs[1] <= 1e-5
    return ok, f"orders {np.round(orders, 2).tolist()}"


def check_bernoulli_ode():
    worst = 0.0
    t = np.linspace(0, 10, 201)
    h = 1e-5
    for x in (0.1, 0.2, 0.5, 0.9):
        dg = (bernoulli_solve(x, t + h) - bernoulli_solve(x, t - h)) / (2 * h)
        g = bernoulli_solve(x, t)
        worst = max(worst, float(np.abs(dg - g + g**3).max()))
    return worst <= 1e-6, f"max ODE residual {worst:.2e}"


def check_likelihood_additivity():
    series = simulate_observations(BernoulliModel(dt=0.1), 0)
    x = np.linspace(-1.5, 2.5, 101)
    whole = log_likelihood(x, series)
    parts = sum(log_likelihood(x, series, blk) for blk in series.windows(5))
    err = float(np.abs(whole - parts).max())
    return err <= 1e-10, f"max |batch - sum of windows| = {err:.1e}"


def check_adam_scale_free():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(20)
    g = rng.standard_normal(20)
    a, sa = adam_step(AdamState.zeros(20, eps=0.0), p, g)
    b, sb = adam_step(AdamState.zeros(20, eps=0.0), p, 1000.0 * g)
    for _ in range(3):
        g = rng.standard_normal(20)
        a, sa = adam_step(sa, a, g)
        b, sb = adam_step(sb, b, 1000.0 * g)
    err = float(np.abs(a - b).max())
    return err <= 1e-12, f"max update difference {err:.1e}"


def _tiny_trainer(seed=0):
    x, _ = bimodal_1d().sample(64, np.random.default_rng(seed))
    cfg = TrainConfig(seed=seed, iterations=4, n=64, nt=4, width=8)
    return GeodesicTrainer(x, None, StdNormal(1), cfg), x


def check_determinism():
    a, _ = _tiny_trainer()
    b, _ = _tiny_trainer()
    ha = a.run().history
    hb = b.run().history
    return ha == hb, f"{len(ha)} identical records" if ha == hb else "histories differ"


def check_checkpoint_roundtrip():
    full, x = _tiny_trainer()
    full.run()
    part, _ = _tiny_trainer()
    part.run(2)
    import json

    data = json.loads(json.dumps(part.checkpoint()))
    resumed = GeodesicTrainer.from_checkpoint(data, x, None, StdNormal(1))
    resumed.history = list(part.history)
    resumed.run(2)
    same = resumed.history == full.history and np.array_equal(resumed.theta, full.theta)
    return same, "resumed run matches" if same else "resumed run diverged"


def check_inverse_inverts():
    params = random_params(1, 8, 4, scale=0.3)
    cfg = FlowConfig(alpha=2.0, nt=16)
    x = np.random.default_rng(4).standard_normal((16, 1))
    fwd = forward_flow(x, None, params, cfg)
    inv = inverse_flow(fwd.positions[-1], params, cfg, w_init=fwd.weights_T)
    err = float(np.abs(inv.positions_T - x).max())
    return err <= 1e-4, f"max position error {err:.1e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("weights positive and normalized", check_weights_positive_normalized),
    ("identity flow", check_identity_flow),
    ("sigma' = tanh", check_sigma_tanh),
    ("potential gradient and Hessian trace", check_potential_derivatives),
    ("mean potential", check_mean_potential),
    ("autodiff random graphs", check_autodiff_random_graphs),
    ("RK4 order", check_rk4_order),
    ("inverse flow undoes forward flow", check_inverse_inverts),
    ("Bernoulli ODE residual", check_bernoulli_ode),
    ("likelihood additivity", check_likelihood_additivity),
    ("ADAM scale-freeness", check_adam_scale_free),
    ("determinism", check_determinism),
    ("checkpoint round-trip", check_checkpoint_roundtrip),
]


def run_all(verbose: bool = False) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - start:.1f}s)")
    return results
