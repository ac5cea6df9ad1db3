import numpy as np
import pytest

from asgdlab.model import derive_asgd_params, discrete_instance, gaussian_instance
from asgdlab.operators import build_operator_set
from asgdlab.verify import (CheckReport, check_bias_contraction, check_fourth_moment_of_U,
                            check_leading_variance, check_matrix_identities, check_mc_agreement,
                            check_potential_conditioning, check_stationary_bound,
                            check_transition_powers, contraction_rate, contraction_sides,
                            identity_residuals, leading_variance_value,
                            potential_condition_number, random_instance, run_verification,
                            structural_checks, suite_passed)


def ops_for(inst):
    return build_operator_set(inst, derive_asgd_params(inst))


def test_contraction_sides_vanish_at_zero():
    ops = ops_for(discrete_instance([0.5, 0.5]))
    assert contraction_sides(ops, np.zeros(4)) == (0.0, 0.0)


@pytest.mark.parametrize("inst, rate", [
    (discrete_instance([1.0]), 1 - 1 / 9),
    (discrete_instance([0.4, 0.3, 0.2, 0.1]), 1 - 1 / 90),
])
def test_bias_contraction_examples(inst, rate):
    ops = ops_for(inst)
    assert contraction_rate(inst) == pytest.approx(rate)
    report = check_bias_contraction(ops, 1000, np.random.default_rng(0))
    assert report.passed, report.line()
    assert report.details["sampled_max"] <= report.details["exact_max"] + 1e-12


def test_contraction_ratio_matches_sides():
    ops = ops_for(gaussian_instance([1.0, 0.2]))
    theta = np.array([0.3, -1.0, 2.0, 0.5])
    after, before = contraction_sides(ops, theta)
    assert after / before <= contraction_rate(ops.instance) + 1e-9


@pytest.mark.parametrize("inst", [discrete_instance([1.0], sigma2=1.0),
                                  gaussian_instance([1.0, 0.5, 0.1], sigma2=2.0),
                                  gaussian_instance([1.0, 0.5])])
def test_stationary_bound_examples(inst):
    report = check_stationary_bound(ops_for(inst))
    assert report.passed, report.line()


@pytest.mark.parametrize("inst, bound", [
    (discrete_instance([0.5, 0.5]), 0.0),
    (discrete_instance([1.0], sigma2=1.0), 5.0),
    (discrete_instance([0.4, 0.3, 0.2, 0.1], sigma2=1.0), 20.0),
])
def test_leading_variance_examples(inst, bound):
    ops = ops_for(inst)
    value = leading_variance_value(ops)
    assert value <= bound * (1 + 1e-8) + 1e-300
    assert check_leading_variance(ops).passed


def test_fourth_moment_of_U():
    for inst in (discrete_instance([0.4, 0.3, 0.2, 0.1]), gaussian_instance([1.0, 0.01, 0.1])):
        assert check_fourth_moment_of_U(ops_for(inst)).passed


def test_resolvent_closed_form_in_one_dimension():
    inst = gaussian_instance([0.7])
    ops = ops_for(inst)
    p, lam = ops.params, 0.7
    lhs = np.linalg.solve(np.eye(2) - ops.A.T, ops.H_block)
    rhs = np.array([[-(p.c - p.g_hat * lam), 0.0], [1 - p.delta * lam, 0.0]]) / p.gap
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("inst", [discrete_instance([0.4, 0.3, 0.2, 0.1]),
                                  gaussian_instance([1.0, 0.02, 0.3])])
def test_matrix_identities(inst):
    for report in check_matrix_identities(ops_for(inst), rng=np.random.default_rng(1)):
        assert report.passed, report.line()


def test_identity_residuals_are_tiny_in_extended_precision():
    ops = ops_for(gaussian_instance(np.logspace(0, -2, 3)))
    tests = [np.eye(6), np.ones((6, 6))]
    for name, value in identity_residuals(ops, tests).items():
        assert value < 1e-30, name


def test_spectral_radius_of_transition_random_instances():
    rng = np.random.default_rng(2)
    for _ in range(50):
        inst = random_instance(rng.choice(["discrete", "gaussian"]), int(rng.integers(1, 4)), rng)
        for report in check_transition_powers(ops_for(inst)):
            assert report.passed, report.line()


@pytest.mark.parametrize("inst", [discrete_instance([0.4, 0.3, 0.2, 0.1]),
                                  gaussian_instance([1.0, 0.01])])
def test_potential_condition_number_corrected_bound(inst):
    ops = ops_for(inst)
    corrected = check_potential_conditioning(ops)[1]
    assert corrected.passed, corrected.line()
    p = ops.params
    assert potential_condition_number(ops) <= 9 * inst.kappa / (1 - p.alpha) ** 2


@pytest.mark.parametrize("inst", [discrete_instance([0.4, 0.3, 0.2, 0.1]),
                                  gaussian_instance([1.0, 0.01])])
def test_potential_condition_number_stated_bound(inst):
    # The stated bound kappa(G) <= 4 kappa / sqrt(1 - alpha^2); expected to fail.
    ops = ops_for(inst)
    alpha = ops.params.alpha
    assert potential_condition_number(ops) <= 4 * inst.kappa / np.sqrt(1 - alpha ** 2)


def test_stated_conditioning_check_is_informational():
    stated = check_potential_conditioning(ops_for(discrete_instance([0.5, 0.5])))[0]
    assert stated.informational
    assert suite_passed([stated])
    assert not suite_passed([CheckReport("x", 2.0, 1.0, False)])


def test_structural_checks_on_random_instances():
    rng = np.random.default_rng(3)
    for kind in ("discrete", "gaussian"):
        reports = structural_checks(random_instance(kind, 3, rng), rng, trials=200)
        assert suite_passed(reports), [r.line() for r in reports if not r.passed]


def test_monte_carlo_agreement_sizes_enforced():
    inst = discrete_instance([0.7, 0.3], sigma2=1.0)
    params = derive_asgd_params(inst)
    with pytest.raises(ValueError, match="runs"):
        check_mc_agreement(inst, params, 10, 20, 100, np.zeros(4))
    with pytest.raises(ValueError, match="sized"):
        check_mc_agreement(inst, params, 10, 1000, 10_000, np.zeros(4))


def test_monte_carlo_zero_case_is_exact():
    inst = discrete_instance([0.7, 0.3])
    cmp = check_mc_agreement(inst, derive_asgd_params(inst), 10, 20, 10_000, np.zeros(4))
    assert not cmp.empirical.any() and not cmp.predicted.any()
    assert cmp.report.passed


def test_run_verification_small():
    reports = run_verification(max_dim=2, trials=1, seed=4)
    assert suite_passed(reports), [r.line() for r in reports if not (r.passed or r.informational)]
    names = {r.name for r in reports}
    assert {"bias_contraction", "stationary_bound", "leading_variance",
            "identity_stein_factorization", "mc_tail_covariance"} <= names


def test_run_verification_rejects_bad_sizes():
    with pytest.raises(ValueError):
        run_verification(max_dim=0)
