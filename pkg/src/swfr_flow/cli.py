"""Command-line entry point: ``swfr-flow {train,generate,bayes,sweep,selftest}``.

Every command except ``generate`` and ``selftest`` reads one strict JSON
config; unknown keys are rejected before any compute starts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError, field_validator, model_validator

from . import svg
from .bayes import (
    BernoulliModel,
    GaussianPrior,
    ObservationSeries,
    compare_to_oracle,
    grid_posterior,
    posterior_oracle,
    run_batch,
    run_online,
    simulate_observations,
)
from .distributions import from_spec, write_weighted_csv
from .flow import forward_flow, write_trajectory_csv
from .metrics import ess
from .trainer import METRIC_KEYS, GeodesicTrainer, TrainConfig, generate_weighted_samples

log = logging.getLogger("swfr_flow")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class DistSpec(Strict):
    kind: Literal["std_normal", "normal", "mixture", "bimodal_1d", "eight_gaussians", "moons", "empirical"]
    dim: Optional[int] = Field(default=None, ge=1)
    mean: Optional[float] = None
    std: Optional[PositiveFloat] = None
    weights: Optional[list[float]] = None
    means: Optional[list[list[float]]] = None
    variances: Optional[list[PositiveFloat]] = None
    radius: Optional[PositiveFloat] = None
    noise: Optional[float] = Field(default=None, ge=0)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "empirical":
            if self.path is None:
                raise ValueError("empirical distributions need a path")
            if not Path(self.path).is_file():
                raise ValueError(f"file not found: {self.path}")
        if self.kind == "normal" and (self.mean is None or self.std is None):
            raise ValueError("normal needs mean and std")
        if self.kind == "mixture" and None in (self.weights, self.means, self.variances):
            raise ValueError("mixture needs weights, means and variances")
        return self

    def build(self):
        return from_spec(self.model_dump(exclude_none=True))


Alpha = Union[PositiveFloat, Literal["inf"]]


class TrainSection(Strict):
    seed: int = 0
    iterations: int = Field(default=1000, ge=1)
    n: int = Field(default=2048, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    n_inverse: Optional[int] = Field(default=None, ge=1)
    alpha: Alpha = 10.0
    T: PositiveFloat = 1.0
    nt: int = Field(default=8, ge=1)
    gamma1: float = Field(default=0.01, ge=0)
    gamma2: float = Field(default=0.01, ge=0)
    width: int = Field(default=32, ge=1)
    lr: PositiveFloat = 0.01
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: PositiveFloat = 1e-8
    clip_norm: Optional[PositiveFloat] = None
    full_graph_inverse: bool = False
    record_wall_time: bool = False

    @field_validator("alpha", mode="before")
    @classmethod
    def _alpha(cls, v):
        if isinstance(v, (int, float)) and not isinstance(v, bool) and not v > 0:
            raise ValueError("alpha must be > 0 or \"inf\"")
        return v

    def to_config(self, **overrides) -> TrainConfig:
        data = self.model_dump()
        data.update(overrides)
        if data["alpha"] == "inf":
            data["alpha"] = math.inf
        return TrainConfig(**data)


class RunBase(Strict):
    name: str = "run"
    out_dir: str = "runs"

    def output_dir(self) -> Path:
        base = os.environ.get("SWFR_OUT_DIR", self.out_dir)
        path = Path(base) / self.name
        path.mkdir(parents=True, exist_ok=True)
        return path


class TrainRunConfig(RunBase):
    source: DistSpec
    target: DistSpec
    train: TrainSection = TrainSection()
    data_seed: int = 0
    snapshots: list[int] = Field(default_factory=list)
    checkpoint_every: Optional[int] = Field(default=None, ge=1)
    trajectory_particles: int = Field(default=64, ge=1)


class ModelSection(Strict):
    x_true: float = 0.2
    sigma: PositiveFloat = 0.4
    dt: PositiveFloat = 1.0
    n_obs: int = Field(default=50, ge=0)
    window: int = Field(default=5, ge=1)


class PriorSection(Strict):
    mean: float = 0.5
    std: PositiveFloat = 1.0


class BayesRunConfig(RunBase):
    mode: Literal["batch", "online"] = "batch"
    model: ModelSection = ModelSection()
    observations: Optional[str] = None
    observation_seed: int = 0
    prior: PriorSection = PriorSection()
    train: TrainSection = TrainSection()
    update_iterations: int = Field(default=300, ge=1)
    n_generate: int = Field(default=100_000, ge=1)
    oracle_count: int = Field(default=1_000_000, ge=10_000)
    oracle_seed: int = 1
    seed: int = 0
    stratified_prior: bool = True

    @field_validator("observations")
    @classmethod
    def _exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"file not found: {v}")
        return v


class SweepRunConfig(RunBase):
    source: DistSpec
    target: DistSpec
    train: TrainSection = TrainSection(gamma2=0.0)
    data_seed: int = 0
    parameter: Literal["alpha", "gamma1"]
    values: list[Alpha] = Field(min_length=1)


def load_config(path, model: type[Strict]):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from None


class ConfigError(ValueError):
    pass


# -- output helpers -----------------------------------------------------------


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class MetricsWriter:
    def __init__(self, path: Path, extra_keys: tuple[str, ...] = ()):
        self.keys = (*extra_keys, *METRIC_KEYS)
        self.fh = open(path, "w")

    def write(self, record: dict, **extra) -> None:
        row = {**extra, **record}
        self.fh.write(json.dumps({k: row.get(k) for k in self.keys}) + "\n")

    def close(self):
        self.fh.close()


def _training_data(source, n: int, seed: int):
    return source.sample(n, np.random.default_rng(seed))


def _snapshot(out: Path, tag: str, params, x, w, cfg: TrainConfig, k_particles: int):
    fwd = forward_flow(x, w, params, cfg.flow)
    ids = np.linspace(0, x.shape[0] - 1, min(x.shape[0], k_particles)).round().astype(int)
    write_trajectory_csv(out / f"trajectory_{tag}.csv", fwd.times, fwd.positions, fwd.weights, fwd.logdets, ids)
    return fwd


def _figures(out: Path, fwd, target, title: str) -> None:
    if fwd.positions.shape[2] == 1:
        grid = None
        if hasattr(target, "log_density") and target.has_density:
            g = np.linspace(fwd.positions.min(), fwd.positions.max(), 400)
            grid = (g, np.exp(target.log_density(g.reshape(-1, 1))))
        svg.density_slices(fwd.times, fwd.positions, fwd.weights, out / "density.svg", reference=grid, title=title)
        svg.trajectory_fan(fwd.times, fwd.positions, fwd.weights, out / "trajectories.svg", title=title)
    else:
        svg.scatter_weighted(fwd.positions[-1, :, :2], fwd.weights[-1], out / "density.svg", title=title)


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg_in = load_config(args.config, TrainRunConfig)
    out = cfg_in.output_dir()
    target = cfg_in.target.build()
    if not target.has_density:
        raise ConfigError("target distribution must have a tractable density")
    source = cfg_in.source.build()
    if source.dim != target.dim:
        raise ConfigError(f"source dimension {source.dim} differs from target dimension {target.dim}")
    cfg = cfg_in.train.to_config()
    x, w = _training_data(source, cfg.n, cfg_in.data_seed)
    trainer = GeodesicTrainer(x, w, target, cfg)
    trainer.meta = {"target": cfg_in.target.model_dump(exclude_none=True)}
    _dump_json(out / "config.json", cfg_in.model_dump(mode="json"))
    metrics = MetricsWriter(out / "metrics.ndjson")
    snaps = set(cfg_in.snapshots)
    try:
        while trainer.iteration < cfg.iterations:
            if trainer.iteration in snaps:
                _snapshot(out, f"iter{trainer.iteration}", trainer.params, x, w, cfg, cfg_in.trajectory_particles)
            try:
                record = trainer.step()
            except FloatingPointError:
                trainer.save(out / "checkpoint_abort.json")
                raise
            metrics.write(record)
            if cfg_in.checkpoint_every and trainer.iteration % cfg_in.checkpoint_every == 0:
                trainer.save(out / f"checkpoint_iter{trainer.iteration}.json")
    finally:
        metrics.close()
    trainer.save(out / "checkpoint_final.json")
    best = trainer.result()
    data = trainer.checkpoint()
    data["params"] = {k: v.tolist() for k, v in best.params.items()}
    (out / "checkpoint_best.json").write_text(json.dumps(data))
    fwd = _snapshot(out, "final", best.params, x, w, cfg, cfg_in.trajectory_particles)
    _figures(out, fwd, target, cfg_in.name)
    summary = {"best_iter": best.best_iter, **(best.history[best.best_iter] if best.history else {})}
    summary["n_eff_terminal"] = ess(fwd.weights_T)
    _dump_json(out / "summary.json", summary)
    print(json.dumps({"status": "ok", "command": "train", "out_dir": str(out), **summary}))
    return 0


def cmd_generate(args) -> int:
    if args.n < 1:
        raise ConfigError("N must be >= 1")
    data = json.loads(Path(args.checkpoint).read_text())
    params = {k: np.asarray(v, dtype=float) for k, v in data["best_params"].items()}
    cfg = TrainConfig.from_dict(data["config"])
    spec = data.get("meta", {}).get("target")
    if args.target is not None:
        spec = json.loads(Path(args.target).read_text())
    if spec is None:
        raise ConfigError("checkpoint carries no target spec; pass --target")
    target = DistSpec.model_validate(spec).build()
    if target.dim != int(data["d"]):
        raise ConfigError(f"checkpoint dimension {data['d']} does not match target dimension {target.dim}")
    xs, ws = generate_weighted_samples(params, args.n, target, cfg.flow, np.random.default_rng(args.seed))
    out = Path(os.environ.get("SWFR_OUT_DIR", ".")) / args.out if not Path(args.out).is_absolute() else Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weighted_csv(out, xs, ws)
    print(json.dumps({"status": "ok", "command": "generate", "path": str(out), "n": args.n, "n_eff": ess(ws)}))
    return 0


def cmd_bayes(args) -> int:
    cfg_in = load_config(args.config, BayesRunConfig)
    out = cfg_in.output_dir()
    m = cfg_in.model
    model = BernoulliModel(m.x_true, m.sigma, m.dt, m.n_obs, m.window)
    if cfg_in.observations is not None:
        series = ObservationSeries.from_csv(cfg_in.observations, model.sigma)
    else:
        series = simulate_observations(model, cfg_in.observation_seed)
    series.to_csv(out / "observations.csv")
    prior = GaussianPrior(cfg_in.prior.mean, cfg_in.prior.std)
    cfg = cfg_in.train.to_config()
    _dump_json(out / "config.json", cfg_in.model_dump(mode="json"))
    if cfg_in.mode == "batch":
        run = run_batch(series, prior, cfg, cfg_in.n_generate, cfg_in.seed, cfg_in.stratified_prior)
    else:
        ucfg = dataclasses.replace(cfg, iterations=cfg_in.update_iterations)
        run = run_online(series, prior, cfg, model.window, cfg_in.n_generate, cfg_in.seed, ucfg, cfg_in.stratified_prior)
    metrics = MetricsWriter(out / "metrics.ndjson", extra_keys=("window",))
    for k, res in enumerate(run.results):
        for rec in res.history:
            metrics.write(rec, window=k)
    metrics.close()
    write_weighted_csv(out / "samples.csv", run.samples, run.weights)
    oracle = posterior_oracle(prior, series, cfg_in.oracle_count, cfg_in.oracle_seed)
    cmp = compare_to_oracle(run.samples, run.weights, oracle)
    grid, dens, gmean, gvar = grid_posterior(prior, series)
    report = {
        "mode": cfg_in.mode,
        "observations": len(series),
        "windows": run.window_ends,
        "oracle": {"mean": oracle.mean, "std": oracle.std, "ess": oracle.ess, "count": cfg_in.oracle_count},
        "grid": {"mean": gmean, "std": math.sqrt(gvar)},
        "generated": cmp.to_dict(),
    }
    _dump_json(out / "report.json", report)
    lo, hi = float(np.quantile(run.samples, 0.0005)), float(np.quantile(run.samples, 0.9995))
    keep = (grid >= lo) & (grid <= hi)
    fig = svg.Figure(520, 360, f"{cfg_in.name}: generated samples vs posterior")
    edges, h = svg.weighted_histogram(run.samples, run.weights, 60, lo, hi)
    top = 1.1 * max(float(h.max()), float(dens[keep].max()))
    p = fig.panel(60, 30, 420, 280, (lo, hi), (0.0, top))
    p.bars(edges, h)
    p.polyline(grid[keep], dens[keep])
    fig.save(out / "posterior.svg")
    print(json.dumps({"status": "ok", "command": "bayes", "out_dir": str(out), **cmp.to_dict()}))
    return 0


def cmd_sweep(args) -> int:
    cfg_in = load_config(args.config, SweepRunConfig)
    out = cfg_in.output_dir()
    target = cfg_in.target.build()
    source = cfg_in.source.build()
    base = cfg_in.train.to_config()
    x, w = _training_data(source, base.n, cfg_in.data_seed)
    _dump_json(out / "config.json", cfg_in.model_dump(mode="json"))
    rows = []
    for value in cfg_in.values:
        v = math.inf if value == "inf" else float(value)
        cfg = dataclasses.replace(base, **{cfg_in.parameter: v})
        trainer = GeodesicTrainer(x, w, target, cfg)
        res = trainer.run()
        rec = res.history[res.best_iter]
        rows.append((value, rec["J_SWFR"], rec["J_KL"]))
        log.info("%s=%s J_SWFR=%.6f J_KL=%.6f", cfg_in.parameter, value, rec["J_SWFR"], rec["J_KL"])
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["value", "J_SWFR", "J_KL"])
        for value, js, jk in rows:
            writer.writerow([value, repr(js), repr(jk)])
    finite = [(float(v), js) for v, js, _ in rows if v != "inf"]
    if finite:
        xs = np.array([a for a, _ in finite])
        xs = np.log10(xs) if cfg_in.parameter == "gamma1" else xs
        svg.curve_plot(xs, {"J_SWFR": np.array([b for _, b in finite])}, out / "sweep.svg",
                       title=f"J_SWFR vs {'log10 ' if cfg_in.parameter == 'gamma1' else ''}{cfg_in.parameter}")
    print(json.dumps({"status": "ok", "command": "sweep", "out_dir": str(out),
                      "rows": [{"value": v, "J_SWFR": a, "J_KL": b} for v, a, b in rows]}))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(verbose=True)
    failed = [name for name, ok, _ in results if not ok]
    print(json.dumps({"status": "ok" if not failed else "fail", "command": "selftest",
                      "passed": len(results) - len(failed), "failed": failed}))
    return 0 if not failed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swfr-flow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="fit a potential from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("generate", help="weighted samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-n", "--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--target", default=None, help="JSON distribution spec overriding the checkpoint's")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("bayes", help="Bernoulli posterior experiment (batch or online)")
    p.add_argument("config")
    p.set_defaults(func=cmd_bayes)
    p = sub.add_parser("sweep", help="J_SWFR across alpha or gamma1 values")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("selftest", help="run the invariant suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _error_record("config", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report every failure as a record
        _error_record(type(exc).__name__, exc)
        return EXIT_RUNTIME


def _error_record(kind: str, exc: BaseException) -> None:
    print(json.dumps({"status": "error", "kind": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
