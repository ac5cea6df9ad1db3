"""Acceptance criteria A1-A10, one PASS/FAIL line each.

The lines are printed as each test runs and collected again in the terminal summary.
A10 is a soft check: it reports PASS or FAIL and warns instead of failing.
"""

import time
import warnings

import numpy as np
import pytest

from asgdlab.harness import SolverSpec, initial_point, samples_to_reach
from asgdlab.model import derive_asgd_params, discrete_instance, gaussian_instance
from asgdlab.operators import build_operator_set
from asgdlab.oracle import spawn_seeds
from asgdlab.solvers import asgd_run_batch, sgd_run_batch
from asgdlab.verify import (check_bias_contraction, check_condition_numbers,
                            check_leading_variance, check_matrix_identities, check_mc_agreement,
                            check_second_moment_direction, check_stationary_bound,
                            random_instance)


def verdict(report, tag, passed, detail, elapsed, limit):
    timed = elapsed < limit
    ok = bool(passed and timed)
    report(f"{tag} {'PASS' if ok else 'FAIL'} {detail} [{elapsed:.1f}s of {limit:g}s]")
    return ok


def ops_for(inst):
    return build_operator_set(inst, derive_asgd_params(inst))


def test_a1_condition_numbers(acceptance_report):
    start = time.perf_counter()
    disc = discrete_instance([0.4, 0.3, 0.2, 0.1])
    exact_err = max(abs(disc.kappa - 10.0), abs(disc.kappa_tilde - 10.0))
    gauss = gaussian_instance(np.ones(4))
    closed_ok = gauss.kappa_tilde == 6.0 and gauss.R2 == 6.0
    mc = check_condition_numbers(gauss, np.random.default_rng(0), n_samples=1_000_000)
    worst_z = max(r.value for r in mc)
    passed = exact_err <= 1e-12 and closed_ok and all(r.passed for r in mc)
    detail = f"discrete err={exact_err:.1e}; gaussian R2=kappa_tilde=6, MC worst z={worst_z:.2f} (<=5)"
    assert verdict(acceptance_report, "A1", passed, detail, time.perf_counter() - start, 5)


def test_a2_bias_contraction(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_margin, all_ok = np.inf, True
    for d in (1, 2, 4, 6):
        for kind in ("discrete", "gaussian"):
            report = check_bias_contraction(ops_for(random_instance(kind, d, rng)), 1000, rng)
            all_ok &= report.passed
            worst_margin = min(worst_margin, report.margin)
    detail = f"8 instances x 1000 directions, smallest margin to rate={worst_margin:.3e}"
    assert verdict(acceptance_report, "A2", all_ok, detail, time.perf_counter() - start, 30)


def stationary_instances():
    rng = np.random.default_rng(2)
    kinds = ["discrete", "gaussian"]
    return [random_instance(kinds[k % 2], int(rng.integers(1, 7)), rng, sigma2=1.0)
            for k in range(20)]


def test_a3_stationary_bound(acceptance_report):
    start = time.perf_counter()
    reports = [check_stationary_bound(ops_for(inst)) for inst in stationary_instances()]
    worst = max(r.value for r in reports)
    detail = f"20 instances, max of -min gap eigenvalue / scale={worst:.2e} (<=1e-8)"
    assert verdict(acceptance_report, "A3", all(r.passed for r in reports), detail,
                   time.perf_counter() - start, 30)


def test_a4_second_moment_closed_forms(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    gaps, bound_ok, count = [], True, 0
    while count < 50:
        kind = ["discrete", "gaussian"][count % 2]
        inst = random_instance(kind, int(rng.integers(1, 5)), rng, low=1e-3)
        params = derive_asgd_params(inst)
        for lam in inst.h_diag:
            closed, bound = check_second_moment_direction(params, lam, inst.kappa_tilde)
            gaps.append(closed.value)
            bound_ok &= bound.passed
            count += 1
    passed = max(gaps) <= 1e-10 and bound_ok
    detail = f"{count} parameterizations, max relative gap={max(gaps):.1e}, u22 bound held={bound_ok}"
    assert verdict(acceptance_report, "A4", passed, detail, time.perf_counter() - start, 60)


def test_a5_leading_variance(acceptance_report):
    start = time.perf_counter()
    instances = stationary_instances() + [discrete_instance([1.0], sigma2=1.0),
                                          discrete_instance([0.4, 0.3, 0.2, 0.1], sigma2=1.0)]
    reports = [check_leading_variance(ops_for(inst)) for inst in instances]
    worst = max(r.value / r.details["nominal_bound"] for r in reports)
    detail = f"{len(reports)} instances, max value/(5 sigma^2 d)={worst:.4f}"
    assert verdict(acceptance_report, "A5", all(r.passed for r in reports), detail,
                   time.perf_counter() - start, 60)


def test_a6_operator_identities(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, all_ok = {}, True
    for k in range(10):
        inst = random_instance(["discrete", "gaussian"][k % 2], int(rng.integers(1, 5)), rng, low=1e-3)
        for r in check_matrix_identities(ops_for(inst), trials=20, rng=rng):
            all_ok &= r.passed
            worst[r.name] = max(worst.get(r.name, 0.0), r.value / r.bound)
    detail = "10 instances, worst value/bound: " + ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    assert verdict(acceptance_report, "A6", all_ok, detail, time.perf_counter() - start, 120)


def test_a7_exact_vs_monte_carlo(acceptance_report):
    start = time.perf_counter()
    cases = {"bias-only": (0.0, np.ones(4)), "variance-only": (1.0, np.zeros(4)),
             "mixed": (1.0, np.ones(4))}
    rng = np.random.default_rng(5)
    parts, all_ok = [], True
    for name, (sigma2, theta0) in cases.items():
        inst = discrete_instance([0.7, 0.3], sigma2=sigma2)
        cmp = check_mc_agreement(inst, derive_asgd_params(inst), 100, 200, 100_000, theta0, rng)
        all_ok &= cmp.report.passed
        parts.append(f"{name} max z={cmp.report.value:.2f}")
    detail = "1e5 runs; " + ", ".join(parts) + " (<=5)"
    assert verdict(acceptance_report, "A7", all_ok, detail, time.perf_counter() - start, 300)


def test_a8_acceleration_in_samples(acceptance_report):
    start = time.perf_counter()
    inst = gaussian_instance(np.logspace(0, -3, 20))
    seeds = spawn_seeds(0, 20)
    x0 = initial_point(inst, "equal_risk", 0, len(seeds))
    steps = {name: samples_to_reach(inst, SolverSpec(name), x0, 1e-3, 100_000, seeds, stride=20)
             for name in ("asgd", "sgd")}
    ratio = steps["asgd"].mean_steps / steps["sgd"].mean_steps
    # Reported only: random unit starts put most initial risk on the top eigendirections.
    unit = initial_point(inst, "random_unit", 0, len(seeds))
    unit_ratio = (samples_to_reach(inst, SolverSpec("asgd"), unit, 1e-3, 100_000, seeds, 20).mean_steps
                  / samples_to_reach(inst, SolverSpec("sgd"), unit, 1e-3, 100_000, seeds, 20).mean_steps)
    detail = (f"d=20, eigenvalues 1..1e-3 (R2/mu={inst.kappa:.0f}), equal-risk starts, mean "
              f"samples to 1e-3 of initial risk: asgd={steps['asgd'].mean_steps:.0f}, "
              f"sgd={steps['sgd'].mean_steps:.0f}, ratio={ratio:.3f} (<0.5); "
              f"random unit starts ratio={unit_ratio:.3f}")
    assert verdict(acceptance_report, "A8", ratio < 0.5, detail, time.perf_counter() - start, 180)


def test_a9_variance_rate(acceptance_report):
    start = time.perf_counter()
    inst = discrete_instance([0.5, 0.5], sigma2=1.0, x_star=[1.0, -1.0])
    n = 100_000
    runs = asgd_run_batch(inst, derive_asgd_params(inst), n, n // 2, spawn_seeds(9, 50),
                          trace_stride=n)
    mean = float(np.mean([r.final_risk for r in runs]))
    limit = 20 * inst.sigma2 * inst.dim / n
    detail = f"mean risk over 50 seeds={mean:.3e}, limit 20 sigma^2 d/n={limit:.1e}"
    assert verdict(acceptance_report, "A9", mean <= limit, detail, time.perf_counter() - start, 120)


def test_a10_degeneracy_report(acceptance_report):
    start = time.perf_counter()
    inst = discrete_instance([0.4, 0.3, 0.2, 0.1], sigma2=1.0, x_star=np.ones(4))
    n, seeds = 100_000, spawn_seeds(10, 20)
    asgd = np.mean([r.final_risk for r in asgd_run_batch(inst, derive_asgd_params(inst), n,
                                                         n // 2, seeds, trace_stride=n)])
    sgd = np.mean([r.final_risk for r in sgd_run_batch(inst, n, n // 2, seeds, trace_stride=n)])
    ratio = max(asgd, sgd) / min(asgd, sgd)
    detail = (f"soft: n={n}, 20 seeds, asgd={asgd:.3e}, sgd={sgd:.3e}, "
              f"minimax={inst.dim / n:.1e}, ratio={ratio:.2f} (<=3)")
    ok = verdict(acceptance_report, "A10", ratio <= 3.0, detail, time.perf_counter() - start, 120)
    if not ok:
        warnings.warn(f"A10 soft check did not hold: {detail}")
