"""Experiment configuration, sample-size sweeps, CSV output and plot scripts.

A configuration is one JSON document::

    {
      "instance": {"kind": "gaussian", "logspace": {"low": 1e-3, "high": 1.0, "d": 20}},
      "sigma2": 0.0,
      "x0": "random_unit",
      "solvers": ["asgd", {"name": "sgd", "step_size": null}],
      "n_grid": {"start": 100, "stop": 100000, "num": 7},
      "tail_fraction": 0.5,
      "seeds": 20,
      "base_seed": 0,
      "output": {"csv": "curve.csv", "plot": "plot_curve.py"}
    }

``instance`` also accepts ``{"kind": "gaussian", "eigenvalues": [...]}`` and
``{"kind": "discrete", "probabilities": [...]}``.  ``x0`` is ``"zero"``,
``"x_star"``, ``"random_unit"`` (unit-length offset from ``x_star`` in a uniformly
random direction), ``"equal_risk"`` (unit-length offset whose initial excess risk is
spread evenly over the eigendirections in expectation) or an explicit vector.
With ``"x0_per_seed": true`` the random rules draw a fresh start for every seed.
``n_grid`` is a list of increasing integers or a log-spaced ``start/stop/num`` range.
Optional fields used by single commands: ``n``, ``t``, ``runs``, ``theta0`` (predict)
and ``constant`` (bound).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (ProblemInstance, TuningConstants, derive_asgd_params,
                    discrete_instance, gaussian_instance)
from .oracle import excess_risk, minimax_reference, spawn_seeds
from .solvers import TRACE_ITERATE, asgd_run_batch, sgd_run_batch

CSV_HEADER = "solver,n,mean_excess_risk,stderr,minimax"
X0_RULES = ("zero", "x_star", "random_unit", "equal_risk")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class SolverSpec:
    name: str
    step_size: Optional[float] = None
    constants: Optional[TuningConstants] = None

    @property
    def label(self) -> str:
        return self.name


@dataclass
class ExperimentConfig:
    instance: ProblemInstance
    solvers: list
    n_grid: list
    # Shape (d,), or (seeds, d) when every seed has its own start.
    x0: np.ndarray
    tail_fraction: float = 0.5
    seeds: int = 20
    base_seed: int = 0
    csv_name: str = "curve.csv"
    plot_name: str = "plot_curve.py"
    extras: dict = field(default_factory=dict)

    def tail_start(self, n: int) -> int:
        return int(math.floor(self.tail_fraction * n))


@dataclass(frozen=True)
class CurvePoint:
    solver: str
    n: int
    mean: float
    stderr: float
    minimax: float
    # Per-seed final risks, in seed order; not written to CSV.
    values: tuple = ()


class RunningStats:
    """Welford accumulation of mean and variance."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, value: float):
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (value - self.mean)

    @property
    def variance(self) -> float:
        return self._m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else 0.0


def _require(cond: bool, field_name: str, message: str):
    if not cond:
        raise ConfigError(f"{field_name}: {message}")


def _parse_instance(raw, sigma2: float, x_star) -> ProblemInstance:
    _require(isinstance(raw, dict), "instance", "must be an object")
    kind = raw.get("kind")
    try:
        if kind == "discrete":
            _require("probabilities" in raw, "instance.probabilities", "required for discrete inputs")
            return discrete_instance(raw["probabilities"], sigma2, x_star)
        if kind == "gaussian":
            if "eigenvalues" in raw:
                return gaussian_instance(raw["eigenvalues"], sigma2, x_star)
            logspace = raw.get("logspace")
            _require(isinstance(logspace, dict), "instance.logspace",
                     "gaussian inputs need 'eigenvalues' or 'logspace'")
            for key in ("low", "high", "d"):
                _require(key in logspace, f"instance.logspace.{key}", "required")
            _require(0 < logspace["low"] <= logspace["high"], "instance.logspace",
                     "need 0 < low <= high")
            _require(int(logspace["d"]) >= 1, "instance.logspace.d", "must be positive")
            lam = np.logspace(np.log10(logspace["high"]), np.log10(logspace["low"]), int(logspace["d"]))
            return gaussian_instance(lam, sigma2, x_star)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"instance: {exc}") from exc
    raise ConfigError(f"instance.kind: expected 'discrete' or 'gaussian', got {kind!r}")


def _parse_solvers(raw) -> list:
    _require(isinstance(raw, list) and raw, "solvers", "must be a nonempty list")
    out, seen = [], set()
    for k, item in enumerate(raw):
        item = {"name": item} if isinstance(item, str) else item
        _require(isinstance(item, dict), f"solvers[{k}]", "must be a name or an object")
        name = item.get("name")
        _require(name in ("asgd", "sgd"), f"solvers[{k}].name", f"unknown solver {name!r}")
        _require(name not in seen, f"solvers[{k}].name", f"duplicate solver {name!r}")
        seen.add(name)
        constants = None
        if name == "asgd" and ("c1" in item or "c4" in item):
            try:
                constants = TuningConstants.from_free(float(item.get("c1", 0.2)),
                                                      float(item.get("c4", 1.0 / 9.0)))
            except ValueError as exc:
                raise ConfigError(f"solvers[{k}]: {exc}") from exc
        step = item.get("step_size")
        _require(step is None or name == "sgd", f"solvers[{k}].step_size", "only applies to sgd")
        out.append(SolverSpec(name, None if step is None else float(step), constants))
    return out


def _parse_grid(raw) -> list:
    if isinstance(raw, dict):
        for key in ("start", "stop", "num"):
            _require(key in raw, f"n_grid.{key}", "required")
        _require(1 <= raw["start"] <= raw["stop"], "n_grid", "need 1 <= start <= stop")
        _require(int(raw["num"]) >= 1, "n_grid.num", "must be positive")
        grid = np.unique(np.round(np.logspace(np.log10(raw["start"]), np.log10(raw["stop"]),
                                              int(raw["num"])))).astype(int)
        return [int(n) for n in grid]
    _require(isinstance(raw, list) and raw, "n_grid", "must be a nonempty list or a range object")
    grid = [int(n) for n in raw]
    _require(all(n >= 1 for n in grid), "n_grid", "entries must be >= 1")
    _require(all(a < b for a, b in zip(grid, grid[1:])), "n_grid", "must be strictly increasing")
    return grid


def initial_point(instance: ProblemInstance, rule, base_seed: int,
                  count: Optional[int] = None) -> np.ndarray:
    """Starting point from a rule name or an explicit vector.

    With ``count`` the random rules return one independent start per seed, shape ``(count, d)``.
    """
    d = instance.dim
    if count is not None and rule in ("random_unit", "equal_risk"):
        return np.stack([_random_start(instance, rule, (7, k), base_seed) for k in range(count)])
    if not isinstance(rule, str):
        x0 = np.asarray(rule, dtype=float).reshape(-1)
        _require(x0.size == d, "x0", f"expected {d} entries, got {x0.size}")
        return x0
    _require(rule in X0_RULES, "x0", f"expected one of {X0_RULES} or a vector")
    if rule == "zero":
        return np.zeros(d)
    if rule == "x_star":
        return instance.x_star.copy()
    return _random_start(instance, rule, (7,), base_seed)


def _random_start(instance: ProblemInstance, rule: str, key: tuple, base_seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=key))
    z = rng.standard_normal(instance.dim)
    if rule == "equal_risk":
        z = z / np.sqrt(instance.h_diag)
    return instance.x_star + z / np.linalg.norm(z)


def parse_config(raw: dict, seed: Optional[int] = None) -> ExperimentConfig:
    """Validate a configuration document; ``seed`` overrides ``base_seed``."""
    _require(isinstance(raw, dict), "config", "must be a JSON object")
    _require("instance" in raw, "instance", "required")
    sigma2 = raw.get("sigma2", 0.0)
    _require(isinstance(sigma2, (int, float)) and sigma2 >= 0, "sigma2", "must be a nonnegative number")
    instance = _parse_instance(raw["instance"], float(sigma2), raw.get("x_star"))
    seeds = raw.get("seeds", 20)
    _require(isinstance(seeds, int) and seeds >= 1, "seeds", "must be an integer >= 1")
    frac = raw.get("tail_fraction", 0.5)
    _require(isinstance(frac, (int, float)) and 0 < frac < 1, "tail_fraction", "must lie in (0, 1)")
    base_seed = raw.get("base_seed", 0) if seed is None else seed
    _require(isinstance(base_seed, int) and base_seed >= 0, "base_seed", "must be a nonnegative integer")
    output = raw.get("output", {})
    _require(isinstance(output, dict), "output", "must be an object")
    per_seed = raw.get("x0_per_seed", False)
    _require(isinstance(per_seed, bool), "x0_per_seed", "must be true or false")
    known = {"instance", "sigma2", "x_star", "x0", "x0_per_seed", "solvers", "n_grid",
             "tail_fraction", "seeds", "base_seed", "output"}
    return ExperimentConfig(
        instance=instance,
        solvers=_parse_solvers(raw.get("solvers", ["asgd", "sgd"])),
        n_grid=_parse_grid(raw.get("n_grid", [1000])),
        x0=initial_point(instance, raw.get("x0", "zero"), base_seed,
                         seeds if per_seed else None),
        tail_fraction=float(frac), seeds=seeds, base_seed=base_seed,
        csv_name=str(output.get("csv", "curve.csv")),
        plot_name=str(output.get("plot", "plot_curve.py")),
        extras={k: v for k, v in raw.items() if k not in known},
    )


def load_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw, seed)


def run_solver(config: ExperimentConfig, solver: SolverSpec, n: int, seeds: Sequence,
               **kwargs) -> list:
    inst, t = config.instance, config.tail_start(n)
    if solver.name == "asgd":
        params = derive_asgd_params(inst, solver.constants)
        return asgd_run_batch(inst, params, n, t, seeds, x0=config.x0, **kwargs)
    return sgd_run_batch(inst, n, t, seeds, solver.step_size, x0=config.x0, **kwargs)


def _run_cell(config: ExperimentConfig, solver: SolverSpec, n: int) -> CurvePoint:
    seeds = spawn_seeds(config.base_seed, config.seeds)
    results = run_solver(config, solver, n, seeds, trace_stride=n)
    stats = RunningStats()
    for r in results:
        stats.push(r.final_risk)
    inst = config.instance
    return CurvePoint(solver.label, n, stats.mean, stats.stderr,
                      minimax_reference(inst.dim, inst.sigma2, n),
                      tuple(r.final_risk for r in results))


def run_experiment(config: ExperimentConfig, threads: int = 1) -> list:
    """Mean and standard error of the tail-average risk for every (solver, n) cell.

    Every cell reuses the same per-seed streams, derived from ``base_seed`` by seed
    index, so results do not depend on ``threads``.
    """
    cells = [(s, n) for s in config.solvers for n in config.n_grid]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(lambda cell: _run_cell(config, *cell), cells))
    else:
        points = [_run_cell(config, s, n) for s, n in cells]
    return sorted(points, key=lambda p: (p.solver, p.n))


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def emit_csv(points: Sequence[CurvePoint], path: str) -> str:
    if not points:
        raise ValueError("cannot write an empty curve table")
    rows = sorted(points, key=lambda p: (p.solver, p.n))
    lines = [CSV_HEADER] + [f"{p.solver},{p.n},{_fmt(p.mean)},{_fmt(p.stderr)},{_fmt(p.minimax)}"
                            for p in rows]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


_PLOT_TEMPLATE = '''"""Log-log plot of tail-average excess risk against sample size."""
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
CSV_PATH = os.path.join(HERE, {csv_name!r})
OUT_PATH = os.path.join(HERE, {png_name!r})
SERIES = {series!r}


def load(path):
    table = {{}}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table.setdefault(row["solver"], []).append(row)
    return table


def main():
    table = load(CSV_PATH)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in SERIES:
        if name == "minimax":
            rows = next(iter(table.values()))
            ns = [int(r["n"]) for r in rows]
            ax.loglog(ns, [float(r["minimax"]) for r in rows], "k--", label="minimax d sigma^2/n")
            continue
        rows = table[name]
        ns = [int(r["n"]) for r in rows]
        mean = [float(r["mean_excess_risk"]) for r in rows]
        err = [float(r["stderr"]) for r in rows]
        ax.errorbar(ns, mean, yerr=err, marker="o", label=name)
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel("number of samples n")
    ax.set_ylabel("excess risk of tail average")
    ax.legend()
    fig.tight_layout()
    fig.savefig(sys.argv[1] if len(sys.argv) > 1 else OUT_PATH, dpi=150)


if __name__ == "__main__":
    main()
'''


def plot_series(points: Sequence[CurvePoint]) -> list:
    """Solver series in sorted order, plus the minimax line unless it is identically zero."""
    series = sorted({p.solver for p in points})
    if any(p.minimax > 0 for p in points):
        series.append("minimax")
    return series


def emit_plot_script(points: Sequence[CurvePoint], path: str, csv_path: str) -> str:
    """Write a standalone matplotlib script that plots the CSV next to it."""
    if not points:
        raise ValueError("cannot plot an empty curve table")
    csv_name = os.path.basename(csv_path)
    png_name = os.path.splitext(os.path.basename(path))[0] + ".png"
    text = _PLOT_TEMPLATE.format(csv_name=csv_name, png_name=png_name,
                                 series=plot_series(points))
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


@dataclass(frozen=True)
class CrossingResult:
    solver: str
    steps: np.ndarray
    # Risk threshold per seed.
    target: np.ndarray

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.steps))


def samples_to_reach(instance: ProblemInstance, solver: SolverSpec, x0, ratio: float,
                     max_steps: int, seeds: Sequence, stride: int = 10) -> CrossingResult:
    """First step (checked every ``stride``) at which the current iterate's risk is at most
    ``ratio`` times the initial risk, per seed; ``inf`` when not reached in ``max_steps``.

    ``x0`` is one start shared by all seeds or one row per seed.
    """
    x0 = np.asarray(x0, dtype=float)
    target = np.broadcast_to(ratio * excess_risk(instance, x0), (len(seeds),))
    config = ExperimentConfig(instance=instance, solvers=[solver], n_grid=[max_steps],
                              x0=x0, tail_fraction=0.5)
    results = run_solver(config, solver, max_steps, seeds, trace_stride=stride,
                         trace_mode=TRACE_ITERATE)
    steps = []
    for r, level in zip(results, target):
        hit = np.nonzero(r.trace_risks <= level)[0]
        steps.append(float(r.trace_steps[hit[0]]) if hit.size else math.inf)
    return CrossingResult(solver.label, np.asarray(steps), np.array(target))
