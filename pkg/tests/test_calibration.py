import math

import numpy as np
import pytest
from scipy import stats

from flagp.calibration import (
    CalibrationProblem,
    DiscrepancySpec,
    HalfCauchy,
    InverseGamma,
    PosteriorSamples,
    calibrated_predict,
    fit_discrepancy,
    linear_discrepancy_basis,
    log_posterior,
    log_posterior_biased,
    log_posterior_unbiased,
    mcmc_calibrate,
    project_residuals,
)
from flagp.dataset import ball_drop_matrix, from_unit_hypercube
from flagp.emulator import EmulatorConfig, draw_weights, fit, predict_weights
from flagp.metrics import interval_score
from flagp.studies import biased_study

from conftest import BLHS4


@pytest.fixture(scope="module")
def biased():
    st = biased_study(578, seed=0)
    model = fit(st.ensemble, EmulatorConfig(subsample=BLHS4, seed=0))
    K = linear_discrepancy_basis(st.index_values)
    return st, model, K


def data_term(lp, problem, sigma2):
    return lp - problem.prior_sigma2.logpdf(sigma2)


class TestPriors:
    def test_inverse_gamma_matches_scipy(self):
        p = InverseGamma(1.0, 0.001)
        for s2 in (1e-4, 0.01, 2.0):
            assert p.logpdf(s2) == pytest.approx(stats.invgamma.logpdf(s2, 1.0, scale=0.001), rel=1e-12)
        assert p.logpdf(-1.0) == -math.inf

    def test_half_cauchy_matches_scipy(self):
        p = HalfCauchy(0.5)
        for s2 in (1e-3, 0.4, 7.0):
            assert p.logpdf(s2) == pytest.approx(stats.halfcauchy.logpdf(s2, scale=0.5), rel=1e-12)


class TestProblem:
    def test_t_dim_must_leave_field_inputs(self, unbiased):
        _, model, prob = unbiased
        with pytest.raises(ValueError):
            CalibrationProblem(model, np.zeros((0, 0)), np.zeros((prob.d_y, 0)), 2)

    def test_field_size_mismatch(self, unbiased):
        _, model, prob = unbiased
        with pytest.raises(ValueError):
            CalibrationProblem(model, prob.X_F[:-1], prob.Y, 1)


class TestUnbiasedPosterior:
    def test_outside_support(self, unbiased):
        _, _, prob = unbiased
        assert log_posterior_unbiased([1.2], 0.01, prob, 0) == -math.inf
        assert log_posterior_unbiased([0.5], -0.01, prob, 0) == -math.inf

    def test_zero_residuals(self, unbiased):
        _, model, prob = unbiased
        t = np.array([0.4])
        mu, s2 = predict_weights(model, prob.joint_inputs(t), prob.m_c)
        Y = model.basis.B @ draw_weights(mu, s2, prob.m_c, np.random.default_rng(7))
        exact = CalibrationProblem(model, prob.X_F, Y, 1)
        lp = log_posterior_unbiased(t, 0.02, exact, np.random.default_rng(7))
        assert data_term(lp, exact, 0.02) == pytest.approx(-0.5 * exact.n * exact.d_y * math.log(0.02), abs=1e-9)

    def test_large_sigma2_drowns_residuals(self, unbiased):
        _, _, prob = unbiased
        s2 = 1e12
        values = [data_term(log_posterior_unbiased([t], s2, prob, 0), prob, s2) for t in (0.1, 0.9)]
        np.testing.assert_allclose(values, -0.5 * prob.n * prob.d_y * math.log(s2), rtol=1e-10)

    def test_truth_beats_wrong_value(self, unbiased):
        _, _, prob = unbiased
        wins = sum(
            log_posterior_unbiased([0.5], 0.01, prob, np.random.default_rng(s))
            > log_posterior_unbiased([0.9], 0.01, prob, np.random.default_rng(s))
            for s in range(100)
        )
        assert wins >= 95

    def test_deterministic_for_fixed_stream(self, unbiased):
        _, _, prob = unbiased
        a = log_posterior(np.array([0.3]), 0.01, prob, np.random.default_rng(3))
        b = log_posterior(np.array([0.3]), 0.01, prob, np.random.default_rng(3))
        assert a == b


class TestDiscrepancy:
    def test_projection_recovers_weights(self, rng):
        K = rng.normal(size=(30, 3))
        V0 = rng.normal(size=(3, 6))
        np.testing.assert_allclose(project_residuals(K @ V0, K), V0, atol=1e-10)

    def test_orthogonal_residuals_project_to_zero(self, rng):
        K = rng.normal(size=(30, 2))
        Q, _ = np.linalg.qr(np.hstack([K, rng.normal(size=(30, 4))]))
        np.testing.assert_allclose(project_residuals(Q[:, 2:], K), 0.0, atol=1e-12)

    def test_rank_deficient_basis(self):
        K = np.column_stack([np.ones(10), 2 * np.ones(10)])
        with pytest.raises(ValueError):
            DiscrepancySpec(K)

    def test_needs_two_points(self, rng):
        with pytest.raises(ValueError):
            fit_discrepancy(rng.normal(size=(5, 1)), DiscrepancySpec(rng.normal(size=(5, 2))), rng.random((1, 1)))

    def test_nugget_is_estimated(self, biased):
        st, model, K = biased
        prob = CalibrationProblem.from_field(model, st.field, 2, discrepancy=DiscrepancySpec(K))
        mu, _ = predict_weights(model, prob.joint_inputs(st.theta_true), 50)
        dm = fit_discrepancy(prob.Y - model.basis.B @ mu, prob.discrepancy, prob.X_F)
        assert all(gp.nugget > 1e-6 for gp in dm.gps)

    def test_linear_bias_residual_reduction(self, biased):
        st, model, K = biased
        prob = CalibrationProblem.from_field(model, st.field, 2, discrepancy=DiscrepancySpec(K))
        mu, _ = predict_weights(model, prob.joint_inputs(st.theta_true), 50)
        R = prob.Y - model.basis.B @ mu
        dm = fit_discrepancy(R, prob.discrepancy, prob.X_F)
        delta = K @ dm.predict(prob.X_F)[0]
        assert np.linalg.norm(R - delta) <= 0.5 * np.linalg.norm(R)

    def test_empty_basis_equals_unbiased(self, biased):
        st, model, _ = biased
        empty = CalibrationProblem.from_field(model, st.field, 2, discrepancy=DiscrepancySpec(np.zeros((100, 0))))
        plain = CalibrationProblem.from_field(model, st.field, 2)
        for t in ([0.2, 0.7], [0.5, 0.5], [0.9, 0.1]):
            for s2 in (0.003, 0.1):
                a = log_posterior_biased(np.array(t), s2, empty, np.random.default_rng(1))
                b = log_posterior_unbiased(np.array(t), s2, plain, np.random.default_rng(1))
                assert a == b

    def test_true_basis_beats_quadratic(self, biased):
        st, model, K = biased
        v = st.index_values / st.index_values.max()
        lin = CalibrationProblem.from_field(model, st.field, 2, discrepancy=DiscrepancySpec(K))
        quad = CalibrationProblem.from_field(model, st.field, 2, discrepancy=DiscrepancySpec(v[:, None] ** 2))
        s2 = 0.01
        diff = [
            log_posterior_biased(st.theta_true, s2, lin, np.random.default_rng(s))
            - log_posterior_biased(st.theta_true, s2, quad, np.random.default_rng(s))
            for s in range(20)
        ]
        assert np.mean(diff) > 0

    def test_mode_near_truth_when_bias_is_in_span(self, biased):
        st, model, K = biased
        R = from_unit_hypercube(st.field.X_F, st.ensemble.input_ranges[:1])[:, 0]
        sim = ball_drop_matrix(R, 0.25, 9.8, st.index_values, "biased")
        x = st.field.X_F[:, 0]
        bias = np.outer(K[:, 0], 0.2 + 0.1 * x) + np.outer(K[:, 1], 0.3 * x)
        Y = sim + bias + 0.1 * np.random.default_rng(0).standard_normal(sim.shape)
        prob = CalibrationProblem(model, st.field.X_F, model.standardization.apply(Y), 2, discrepancy=DiscrepancySpec(K))
        grid = np.linspace(0.05, 0.95, 9)
        # average over shared seeds so grid points are compared on common draws
        vals = np.array(
            [
                [np.mean([log_posterior_biased(np.array([c, g]), 0.006, prob, np.random.default_rng(s)) for s in range(12)]) for g in grid]
                for c in grid
            ]
        )
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        assert np.all(np.abs(np.array([grid[i], grid[j]]) - st.theta_true) <= 0.25)


@pytest.fixture(scope="module")
def chain(unbiased):
    _, _, prob = unbiased
    return mcmc_calibrate(prob, 1500, 500, seed=11)


class TestMcmc:
    def test_shapes_and_support(self, chain):
        assert chain.theta.shape == (1500, 1) and chain.sigma2.shape == (1500,)
        assert np.all((chain.theta >= 0) & (chain.theta <= 1))
        assert np.all(chain.sigma2 > 0)
        assert chain.proposal_cov.shape == (2, 2)

    def test_acceptance_rate(self, chain):
        assert 0.1 <= chain.acceptance_rate <= 0.5

    def test_covers_truth(self, chain):
        C = 0.05 + 0.1 * chain.theta_post[:, 0]
        lo, hi = np.quantile(C, [0.025, 0.975])
        assert lo <= 0.1 <= hi
        assert abs(C.mean() - 0.1) < 0.01

    def test_reproducible(self, unbiased, chain):
        _, _, prob = unbiased
        again = mcmc_calibrate(prob, 1500, 500, seed=11)
        np.testing.assert_array_equal(again.theta, chain.theta)

    def test_proposal_frozen_after_burn_in(self, unbiased, chain):
        _, _, prob = unbiased
        longer = mcmc_calibrate(prob, 1700, 500, seed=11)
        np.testing.assert_array_equal(longer.proposal_cov, chain.proposal_cov)
        np.testing.assert_array_equal(longer.theta[:1500], chain.theta)

    def test_thinning(self, unbiased):
        _, _, prob = unbiased
        post = mcmc_calibrate(prob, 300, 100, seed=1, thin=3)
        assert post.theta.shape == (300, 1)
        idx = post.thinned(50)
        assert idx[0] == 100 and idx[-1] == 299 and len(np.unique(idx)) == 50

    def test_bad_burn_in(self, unbiased):
        _, _, prob = unbiased
        with pytest.raises(ValueError):
            mcmc_calibrate(prob, 100, 100)

    def test_bad_estimator(self, unbiased):
        _, _, prob = unbiased
        with pytest.raises(ValueError):
            mcmc_calibrate(prob, 100, 10, estimator="exact")

    def test_crn_estimator_runs(self, unbiased):
        _, _, prob = unbiased
        post = mcmc_calibrate(prob, 400, 200, seed=2, estimator="crn")
        assert 0.0 < post.acceptance_rate < 1.0


class TestCalibratedPredict:
    def test_zero_noise_point_posterior_is_emulator_spread(self, unbiased):
        st, model, prob = unbiased
        theta = np.array([0.5])
        x = st.X_test[40:41]
        S = 4000
        cp = calibrated_predict(prob, None, x, m=50, draws=[(theta, 0.0)] * S, rng=0)
        mu, s2 = predict_weights(model, prob.joint_inputs(theta, x), 50)
        half = np.abs(model.basis.B[:, 0]) * math.sqrt(s2[0, 0]) * stats.t.ppf(0.975, 50) * model.standardization.scale
        np.testing.assert_allclose((cp.upper - cp.lower)[:, 0] / 2, half, rtol=0.1)

    def test_beats_zero_width_interval(self, unbiased):
        st, _, prob = unbiased
        post = mcmc_calibrate(prob, 600, 300, seed=4)
        cp = calibrated_predict(prob, post, st.X_test, S_sub=100, rng=1)
        assert interval_score(cp.lower, cp.upper, st.Y_test).mean() < interval_score(cp.mean, cp.mean, st.Y_test).mean()

    def test_too_many_draws(self, unbiased):
        _, _, prob = unbiased
        post = mcmc_calibrate(prob, 150, 100, seed=4)
        with pytest.raises(ValueError):
            calibrated_predict(prob, post, [[0.5]], S_sub=100)

    def test_empty_posterior(self, unbiased):
        _, _, prob = unbiased
        empty = PosteriorSamples(np.zeros((5, 1)), np.ones(5), np.zeros(5), np.zeros(5, bool), 5, 0.0, np.eye(2))
        with pytest.raises(ValueError):
            calibrated_predict(prob, empty, [[0.5]], S_sub=1)

    def test_biased_prediction_runs(self, biased):
        st, model, K = biased
        prob = CalibrationProblem.from_field(model, st.field, 2, discrepancy=DiscrepancySpec(K))
        cp = calibrated_predict(prob, None, st.X_test[:5], draws=[(st.theta_true, 0.006)] * 5, rng=0)
        assert cp.mean.shape == (100, 5)
        assert np.all(cp.lower <= cp.upper)
