import math

import numpy as np
import pytest

from lmrecon.engine import (
    SolverConfig,
    compute_constants_exact,
    compute_constants_noisy,
    iterations_for_accuracy,
    kstar_log_estimate,
    kstar_upper_bound,
    landweber_run,
    nu_additional_bound,
    qtilde,
    rate_bound,
    run_exact,
    run_noisy,
    tangential_cone_eta,
)
from lmrecon.errors import (
    BudgetBeforeDiscrepancy,
    ConditionViolated,
    ConfigInvalid,
    DivergenceDetected,
)
from lmrecon.gallery import get_problem
from lmrecon.operators import ForwardModel, StabilityCertificate


def unit_cert(eps=1.0, rho_prime=10.0, lip=1.0, jac=1.0, holder=1.0):
    return StabilityCertificate(
        lip_deriv=lip, jac_bound=jac, holder_const=holder, holder_eps=eps,
        domain_rho_prime=rho_prime, forward_lip=1.0, recon_const=1.0,
    )


class TestConstantsExact:
    def test_unit_example(self):
        tc = compute_constants_exact(unit_cert(), 0.5)
        assert abs(tc.rho - 0.03125) <= 1e-15
        assert abs(tc.c - 0.125) <= 1e-15
        assert tc.q_condition_ok and tc.rho_lt_rho_prime

    def test_vanishing_q_limit(self):
        tc = compute_constants_exact(unit_cert(), 1e-6)
        assert tc.rho <= 1e-12 * 0.5 * 0.25 + 1e-20
        assert tc.c <= 1e-6

    def test_eps_half_exponent(self):
        tc = compute_constants_exact(unit_cert(eps=0.5), 0.5)
        assert abs(tc.rho - 0.001953125) <= 1e-15

    def test_condition_violated_on_small_ball(self):
        with pytest.raises(ConditionViolated):
            compute_constants_exact(unit_cert(rho_prime=0.01), 0.5)
        tc = compute_constants_exact(unit_cert(rho_prime=0.01), 0.5,
                                     strict=False)
        assert not tc.rho_lt_rho_prime


class TestConstantsNoisy:
    def test_r_value(self):
        tc = compute_constants_noisy(unit_cert(), 0.5, 4.0)
        assert abs(tc.R - 0.1875) <= 1e-15

    def test_r_boundary_raises(self):
        with pytest.raises(ConditionViolated):
            compute_constants_noisy(unit_cert(), 0.5, 3.0)

    def test_rho_value(self):
        tc = compute_constants_noisy(unit_cert(), 0.5, 4.0)
        assert abs(tc.rho - 0.0078125) <= 1e-15

    def test_c_prime_coefficient(self):
        tc = compute_constants_noisy(unit_cert(), 0.5, 4.0)
        assert abs(tc.c_prime_coeff - 0.25 * 16 * 0.1875) <= 1e-13


class TestRateBound:
    def test_k0_is_rho_lipschitz_case(self):
        tc = compute_constants_exact(unit_cert(), 0.5)
        assert rate_bound(0, tc, 1.0) == tc.rho

    def test_k0_is_rho_holder_case(self):
        tc = compute_constants_exact(unit_cert(eps=0.5), 0.5)
        assert abs(rate_bound(0, tc, 0.5) - tc.rho) <= 1e-15 * tc.rho

    def test_k10_repeated_multiplication_oracle(self):
        tc = compute_constants_exact(unit_cert(), 0.5)
        expected = tc.rho
        for _ in range(10):
            expected *= 1.0 - tc.c
        assert abs(rate_bound(10, tc, 1.0) - expected) <= 1e-15
        # frozen from the oracle: 0.03125 * 0.875^10
        assert abs(expected - 0.008221111755119637) <= 1e-15


class TestIterationsForAccuracy:
    def test_target_at_rho(self):
        tc = compute_constants_exact(unit_cert(), 0.5)
        assert iterations_for_accuracy(tc.rho, tc, 1.0) == 0

    def test_lipschitz_case_example(self):
        tc = compute_constants_exact(unit_cert(), 0.5)
        m = iterations_for_accuracy(0.008, tc, 1.0)
        assert m == 11
        assert rate_bound(11, tc, 1.0) <= 0.008 < rate_bound(10, tc, 1.0)

    def test_holder_case_matches_scan(self):
        tc = compute_constants_exact(unit_cert(eps=0.5), 0.5)
        target = 1e-7
        m = iterations_for_accuracy(target, tc, 0.5)
        scan = 0
        while rate_bound(scan, tc, 0.5) > target:
            scan += 1
        assert m == scan


class TestKstarBound:
    def test_direct_arithmetic(self):
        from lmrecon.engine import TheoryConstantsNoisy

        cert = unit_cert()
        tc = TheoryConstantsNoisy(rho=0.03125, R=0.1875, kstar_bound=None,
                                  c_prime_coeff=0.75, rho_lt_rho_prime=True)
        bound = kstar_upper_bound(tc, cert, 0.5, 4.0, 0.01)
        # 0.03125 / (0.25 * 0.1875 * 0.0016) = 416.66..
        assert bound == 416

    def test_formula_uses_noisy_rho(self):
        cert = unit_cert()
        tc = compute_constants_noisy(cert, 0.5, 4.0)
        bound = kstar_upper_bound(tc, cert, 0.5, 4.0, 0.01)
        assert bound == math.floor(0.0078125 / (0.25 * 0.1875 * 0.0016))

    def test_delta_scaling(self):
        cert = unit_cert()
        tc = compute_constants_noisy(cert, 0.5, 4.0)
        b1 = kstar_upper_bound(tc, cert, 0.5, 4.0, 0.01)
        b2 = kstar_upper_bound(tc, cert, 0.5, 4.0, 0.02)
        exact = cert.jac_bound**2 * tc.rho / (0.25 * tc.R * (4.0 * 0.02) ** 2)
        assert b2 == math.floor(exact)
        assert abs(b1 / 4 - b2) <= 1

    def test_monotone_in_r(self):
        cert = unit_cert()
        bounds = []
        for tau in (3.5, 4.0, 8.0):
            tc = compute_constants_noisy(cert, 0.5, tau)
            bounds.append(tc.R)
        assert bounds == sorted(bounds)


class TestQtilde:
    def test_zero_initial_error(self):
        assert qtilde(0.5, unit_cert(), 0.0) == 0.5

    def test_hand_arithmetic(self):
        s = 0.1 / math.sqrt(2.0)
        expected = (0.5 + s) / (1.0 - s)
        value = qtilde(0.5, unit_cert(), 0.1)
        assert abs(value - expected) <= 1e-15
        assert abs(value - 0.61413) <= 1e-5

    def test_monotone_in_initial_error(self):
        values = [qtilde(0.5, unit_cert(), e0) for e0 in (0.0, 0.05, 0.1, 0.3)]
        assert values == sorted(values)
        assert len(set(values)) == len(values)

    def test_condition_violations(self):
        with pytest.raises(ConditionViolated):
            qtilde(0.5, unit_cert(eps=0.5), 0.1)
        bound = nu_additional_bound(unit_cert())
        with pytest.raises(ConditionViolated):
            qtilde(bound + 0.01, unit_cert(), 0.1)
        with pytest.raises(ConditionViolated):
            qtilde(0.5, unit_cert(), 2.0)  # L*C_F/sqrt(2)*e0 >= 1

    def test_log_estimate(self):
        assert kstar_log_estimate(0.5, 1.0, 4.0, 1e-3) == \
            math.ceil(1.0 + math.log(250.0) / math.log(2.0))
        assert kstar_log_estimate(0.5, 1e-4, 4.0, 1e-3) == 0


class TestRunExact:
    def test_scalar_geometric_residuals(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=20, tol_alpha=1e-13)
        trace = run_exact(prob.model, prob.x_dagger, prob.y_exact,
                          np.array([0.0]), cfg)
        res = trace.residuals()
        assert len(res) == 21
        expected = 2.0 ** -np.arange(21)
        assert np.max(np.abs(res - expected)) <= 1e-12

    def test_start_at_solution(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=20)
        trace = run_exact(prob.model, prob.x_dagger, prob.y_exact,
                          prob.x_dagger, cfg)
        assert trace.terminal == "zero_residual"
        assert trace.iterations == 0

    def test_quadratic_rate_bound(self):
        prob = get_problem("quadratic-2d")
        tc = compute_constants_exact(prob.certificate, 0.5)
        cfg = SolverConfig(q=0.5, max_iters=iterations_for_accuracy(1e-8, tc, 1.0))
        trace = run_exact(prob.model, prob.x_dagger, prob.y_exact,
                          prob.default_x0, cfg, tc)
        assert trace.hypothesis.armed
        gams = trace.gammas()
        for k, g in enumerate(gams):
            assert g <= rate_bound(k, tc, 1.0) * (1.0 + 1e-9)

    def test_target_error_stopping(self):
        prob = get_problem("quadratic-2d")
        cfg = SolverConfig(q=0.5, max_iters=100, stop_mode="target_error",
                           target_gamma=1e-6)
        trace = run_exact(prob.model, prob.x_dagger, prob.y_exact,
                          prob.default_x0, cfg)
        assert trace.terminal == "target_reached"
        assert trace.records[-1].gamma <= 1e-6

    def test_rejects_discrepancy_mode(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=5, tau=2.0, delta=1e-3,
                           stop_mode="discrepancy")
        with pytest.raises(ConfigInvalid):
            run_exact(prob.model, None, prob.y_exact, np.array([0.0]), cfg)


class TestRunNoisy:
    def test_kstar_zero_when_data_good_enough(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=10, tau=2.0, delta=1.0,
                           stop_mode="discrepancy")
        trace = run_noisy(prob.model, prob.x_dagger, prob.y_exact,
                          np.array([0.0]), cfg)
        assert trace.terminal == "discrepancy_stop"
        assert trace.k_star == 0
        assert trace.iterations == 0

    def test_scalar_recurrence_oracle(self):
        # Independent oracle: run the closed-form scalar recurrence on the
        # same fixed noise realization and count steps to the threshold.
        a, q, tau, delta = 2.0, 0.5, 4.0, 1e-3
        rng = np.random.default_rng(123)
        u = rng.standard_normal(1)
        y_delta = 1.0 + delta * u / np.linalg.norm(u)

        x, steps = 0.0, 0
        while abs(y_delta[0] - a * x) > tau * delta:
            r = y_delta[0] - a * x
            x += r * (1.0 - q) / a
            steps += 1

        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=q, max_iters=100, tau=tau, delta=delta,
                           stop_mode="discrepancy", tol_alpha=1e-12)
        trace = run_noisy(prob.model, prob.x_dagger, y_delta,
                          np.array([0.0]), cfg)
        assert trace.k_star == steps
        assert trace.records[trace.k_star].residual <= tau * delta
        for rec in trace.records[:trace.k_star]:
            assert rec.residual > tau * delta

    def test_zero_delta_degenerates_to_exact(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=300, tau=2.0, delta=0.0,
                           stop_mode="discrepancy")
        trace = run_noisy(prob.model, prob.x_dagger, prob.y_exact,
                          np.array([0.0]), cfg)
        # threshold 0 is only met at the numerical floor
        assert trace.terminal in ("zero_residual", "discrepancy_stop")
        assert trace.records[-1].residual <= 1e-12

    def test_budget_before_discrepancy(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=2, tau=4.0, delta=1e-6,
                           stop_mode="discrepancy")
        trace = run_noisy(prob.model, prob.x_dagger, prob.y_exact,
                          np.array([0.0]), cfg)
        assert trace.terminal == "budget_exhausted"
        assert trace.k_star is None
        with pytest.raises(BudgetBeforeDiscrepancy):
            run_noisy(prob.model, prob.x_dagger, prob.y_exact,
                      np.array([0.0]), cfg, strict_budget=True)


class TestLandweber:
    def test_scalar_one_step_special_tuning(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=5)
        trace = landweber_run(prob.model, prob.y_exact, np.array([0.0]),
                              0.25, cfg, x_dagger=prob.x_dagger)
        # x1 = 0 + 0.25 * 2 * (1 - 0) = 0.5 = truth
        assert trace.terminal == "zero_residual"
        assert trace.iterations == 1
        assert trace.records[1].residual == 0.0

    def test_scalar_contraction_factor(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=10)
        trace = landweber_run(prob.model, prob.y_exact, np.array([0.0]),
                              0.1, cfg, x_dagger=prob.x_dagger)
        res = trace.residuals()
        ratios = res[1:] / res[:-1]
        assert np.max(np.abs(ratios - 0.6)) <= 1e-12

    def test_step_scale_precondition(self):
        prob = get_problem("scalar-linear")
        cfg = SolverConfig(q=0.5, max_iters=5)
        with pytest.raises(ConditionViolated):
            landweber_run(prob.model, prob.y_exact, np.array([0.0]), 1.0, cfg)

    def test_divergence_detected(self):
        # gradient step fine at x0 but explosive once iterates grow
        model = ForwardModel(
            dim_x=1, dim_y=1, center=np.zeros(1), radius_sq=1e12,
            forward=lambda x: x + 10.0 * x**3,
            jacobian_apply=lambda x, v: (1.0 + 30.0 * x**2) * v,
            jacobian_adjoint_apply=lambda x, w: (1.0 + 30.0 * x**2) * w,
        )
        cfg = SolverConfig(q=0.5, max_iters=100, domain_mode="off")
        with pytest.raises(DivergenceDetected):
            landweber_run(model, np.array([50.0]), np.array([0.0]), 0.9, cfg)


class TestSolverConfigValidation:
    def test_q_range(self):
        with pytest.raises(ConfigInvalid):
            SolverConfig(q=1.5, max_iters=1)

    def test_discrepancy_needs_tau(self):
        with pytest.raises(ConfigInvalid):
            SolverConfig(q=0.5, max_iters=1, stop_mode="discrepancy")
        with pytest.raises(ConfigInvalid):
            SolverConfig(q=0.5, max_iters=1, stop_mode="discrepancy", tau=1.0,
                         delta=1e-3)

    def test_target_needs_gamma(self):
        with pytest.raises(ConfigInvalid):
            SolverConfig(q=0.5, max_iters=1, stop_mode="target_error")


def test_tangential_cone_eta_shrinks_with_ball():
    cert = unit_cert()
    etas = [tangential_cone_eta(cert, rp) for rp in (1.0, 0.1, 0.01)]
    assert etas == sorted(etas, reverse=True)
    # eps = 1: eta = (L/2) * 2 sqrt(2 rho') * sqrt(2) C_F
    assert abs(etas[0] - 0.5 * 2.0 * math.sqrt(2.0) * math.sqrt(2.0)) <= 1e-14


def test_trace_determinism():
    prob = get_problem("quadratic-2d")
    cfg = SolverConfig(q=0.5, max_iters=15)
    traces = [
        run_exact(prob.model, prob.x_dagger, prob.y_exact, prob.default_x0, cfg)
        for _ in range(2)
    ]
    a, b = traces
    assert a.terminal == b.terminal
    for ra, rb in zip(a.records, b.records):
        assert (ra.k, ra.alpha, ra.residual, ra.gamma, ra.step_norm,
                ra.mdp_prime_rel_err) == \
               (rb.k, rb.alpha, rb.residual, rb.gamma, rb.step_norm,
                rb.mdp_prime_rel_err)
