"""Command-line entry point: ``asgdlab {condnum,run,bound,verify,predict}``.

Exit codes: 0 on success (and when every check passes), 1 when a check fails,
2 for invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .harness import (ConfigError, emit_csv, emit_plot_script, load_config, run_experiment)
from .model import derive_asgd_params
from .operators import bias_variance_decompose, build_operator_set
from .solvers import excess_risk_bound
from .verify import MIN_MC_RUNS, check_mc_agreement, run_verification, suite_passed

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _load(args):
    return load_config(args.config, args.seed)


def _single_start(config) -> np.ndarray:
    if config.x0.ndim != 1:
        raise ConfigError("x0_per_seed: this command needs a single starting point")
    return config.x0


def cmd_condnum(args) -> int:
    inst = _load(args).instance
    print(f"kind        {inst.kind}")
    print(f"d           {inst.dim}")
    print(f"mu          {inst.mu:.17g}")
    print(f"R2          {inst.R2:.17g}")
    print(f"kappa       {inst.kappa:.17g}")
    print(f"kappa_tilde {inst.kappa_tilde:.17g}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    os.makedirs(args.out_dir, exist_ok=True)
    points = run_experiment(config, threads=args.threads)
    csv_path = emit_csv(points, os.path.join(args.out_dir, config.csv_name))
    plot_path = emit_plot_script(points, os.path.join(args.out_dir, config.plot_name), csv_path)
    print(f"{'solver':<6} {'n':>9} {'mean_excess_risk':>18} {'stderr':>12} {'minimax':>12}")
    for p in points:
        print(f"{p.solver:<6} {p.n:>9d} {p.mean:>18.6e} {p.stderr:>12.3e} {p.minimax:>12.3e}")
    print(f"wrote {csv_path}")
    print(f"wrote {plot_path}")
    return EXIT_OK


def cmd_bound(args) -> int:
    config = _load(args)
    inst = config.instance
    params = derive_asgd_params(inst)
    constant = float(config.extras.get("constant", 1.0))
    cols = ("leading_bias", "leading_variance", "lower_order_bias", "lower_order_variance",
            "vanishing_variance", "total", "half_tail_rate")
    print(f"constant C = {constant:g}; kappa = {inst.kappa:.6g}; kappa_tilde = {inst.kappa_tilde:.6g}")
    print(f"{'n':>9} {'t':>9} " + " ".join(f"{c:>20}" for c in cols))
    for n in config.n_grid:
        rep = excess_risk_bound(inst, params, n, config.tail_start(n), _single_start(config),
                             constant)
        print(f"{n:>9d} {rep.tail_start:>9d} " + " ".join(f"{getattr(rep, c):>20.6e}" for c in cols))
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    reports = run_verification(max_dim=args.d, trials=args.trials, seed=seed)
    for r in sorted(reports, key=lambda r: r.name):
        print(r.line())
    failed = sorted({r.name for r in reports if not (r.passed or r.informational)})
    print(f"{len(reports)} checks, {len(failed)} failing")
    if failed:
        print("failing: " + ", ".join(failed))
    return EXIT_OK if suite_passed(reports) else EXIT_FAILED


def cmd_predict(args) -> int:
    config = _load(args)
    inst, extras = config.instance, config.extras
    n = int(extras.get("n", 200))
    t = int(extras.get("t", config.tail_start(n)))
    runs = int(extras.get("runs", MIN_MC_RUNS))
    if "theta0" in extras:
        theta0 = np.asarray(extras["theta0"], dtype=float)
        if theta0.size != 2 * inst.dim:
            raise ConfigError(f"theta0: expected {2 * inst.dim} entries, got {theta0.size}")
    else:
        offset = _single_start(config) - inst.x_star
        theta0 = np.concatenate([offset, offset])
    params = derive_asgd_params(inst)
    try:
        cmp = check_mc_agreement(inst, params, t, n, runs, theta0,
                                 np.random.default_rng(config.base_seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    parts = bias_variance_decompose(build_operator_set(inst, params), theta0, t, n)
    np.set_printoptions(precision=6, linewidth=120)
    print(f"n={n} t={t} runs={runs}")
    print(f"predicted bias risk      {parts.bias:.6e}")
    print(f"predicted variance risk  {parts.variance:.6e}")
    print(f"predicted total risk     {parts.exact_total:.6e}")
    print("predicted E[theta theta^T]:")
    print(cmp.predicted)
    print("empirical E[theta theta^T]:")
    print(cmp.empirical)
    print("standard errors:")
    print(cmp.stderr)
    print(cmp.report.line())
    return EXIT_OK if cmp.report.passed else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the base seed")
    common.add_argument("--out-dir", default=".", help="directory for generated files")
    common.add_argument("--threads", type=int, default=1, help="worker threads for experiment cells")

    parser = argparse.ArgumentParser(prog="asgdlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in (("condnum", cmd_condnum, "print mu, R^2, kappa and kappa_tilde"),
                           ("run", cmd_run, "run an experiment and write CSV plus plot script"),
                           ("bound", cmd_bound, "report each term of the excess-risk bound"),
                           ("predict", cmd_predict, "exact prediction against Monte Carlo")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("config", help="JSON experiment configuration")
        p.set_defaults(func=fn)
    p = sub.add_parser("verify", parents=[common], help="run the verification suite")
    p.add_argument("--d", type=int, default=4, help="largest dimension to test")
    p.add_argument("--trials", type=int, default=3, help="random instances per (kind, d)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
