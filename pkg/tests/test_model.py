import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanscore import checks
from meanscore.errors import ConvergenceError, DataError, EstimationError
from meanscore.model import (Cohort, LinkKind, SubjectRecord, ThetaParams, fit_weighted, hazard,
                             hessian, loglik, score, survival_curve, weighted_loglik)
from oracles import logistic_irls, person_period_loglik


def theta(alpha, beta, link="cloglog"):
    return ThetaParams(np.asarray(alpha, float), np.asarray(beta, float), LinkKind.parse(link))


class TestHazard:
    def test_logit_symmetry(self):
        assert hazard(theta([0.0], [0.0], "logit"), 1, [0.0]) == pytest.approx(0.5)

    def test_cloglog_closed_form(self):
        assert hazard(theta([0.0], [0.0]), 1, [0.0]) == pytest.approx(1 - math.exp(-1), abs=1e-12)

    def test_tabulated_baseline(self):
        t = theta([-3.410, -3.027], [0.405, -0.357, 0.262, -0.262])
        assert hazard(t, 1, np.zeros(4)) == pytest.approx(1 - math.exp(-math.exp(-3.410)), rel=1e-12)

    @pytest.mark.parametrize("eta", [-800.0, -50.0, 0.0, 50.0, 800.0])
    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_strictly_inside_unit_interval(self, eta, link):
        lam = hazard(theta([eta], [0.0], link), 1, [0.0])
        assert 0.0 < lam < 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            hazard(theta([0.0], [0.0, 1.0]), 1, [0.0])
        with pytest.raises(DataError):
            hazard(theta([0.0], [0.0]), 2, [0.0])


class TestSurvival:
    def test_starts_at_one_and_decreases(self, rng):
        t = theta(rng.normal(-1, 1, 6), rng.normal(0, 1, 3))
        s = survival_curve(t, rng.normal(0, 1, 3))
        assert s[0] == 1.0
        assert np.all(np.diff(s) <= 0)

    def test_geometric(self):
        s = survival_curve(theta(np.zeros(5), [0.0], "logit"), [0.0])
        np.testing.assert_allclose(s, 0.5 ** np.arange(5))


class TestLoglik:
    def test_single_event(self):
        rec = SubjectRecord(1, True, (0,), [0.0])
        assert loglik(theta([0.0], [0.0], "logit"), rec) == pytest.approx(-math.log(2))

    def test_two_periods_censored(self):
        rec = SubjectRecord(2, False, (0,), [0.0])
        assert loglik(theta([0.0, 0.0], [0.0], "logit"), rec) == pytest.approx(2 * math.log(0.5))

    def test_missing_covariates(self):
        with pytest.raises(DataError):
            loglik(theta([0.0], [0.0]), SubjectRecord(1, True, (0,), None))

    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_matches_person_period_oracle(self, rng, link):
        for _ in range(50):
            J, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            t = theta(rng.uniform(-3, 0.5, J), rng.normal(0, 0.5, d), link)
            rec = SubjectRecord(int(rng.integers(1, J + 1)), bool(rng.random() < 0.5), (0,), rng.normal(0, 1, d))
            ref = person_period_loglik(t.alpha, t.beta, rec.covariates, rec.time_index, rec.event, link)
            assert loglik(t, rec) == pytest.approx(ref, rel=1e-10, abs=1e-12)


class TestDerivatives:
    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_score_and_hessian_match_finite_differences(self, rng, link):
        for _ in range(30):
            J, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            t, rec = checks.random_theta(rng, J, d, link), checks.random_record(rng, J, d)
            assert checks.relative_error(score(t, rec), checks.fd_score(t, rec)) < 1e-6
            assert checks.relative_error(hessian(t, rec), checks.fd_hessian(t, rec)) < 1e-5

    def test_logit_alpha_block_diagonal_and_nsd(self, rng):
        t = theta(rng.normal(-1, 0.5, 5), rng.normal(0, 1, 2), "logit")
        H = hessian(t, SubjectRecord(4, True, (0,), rng.normal(0, 1, 2)))
        block = H[:5, :5]
        assert np.all(block[~np.eye(5, dtype=bool)] == 0.0)
        np.testing.assert_allclose(H, H.T)
        assert np.max(np.linalg.eigvalsh(H)) <= 1e-10

    def test_cloglog_hessian_nsd(self, rng):
        for _ in range(50):
            t = checks.random_theta(rng, 4, 3, "cloglog")
            H = hessian(t, checks.random_record(rng, 4, 3))
            assert np.max(np.linalg.eigvalsh(H)) <= 1e-10

    def test_logit_score_zero_when_outcome_equals_hazard(self):
        # alpha = 0 gives lambda = 1/2; averaging an event and a non-event record
        t = theta([0.0], [0.0], "logit")
        s = score(t, SubjectRecord(1, True, (0,), [1.0])) + score(t, SubjectRecord(1, False, (0,), [1.0]))
        assert s[0] == pytest.approx(0.0)


class TestFit:
    @pytest.mark.parametrize("seed", range(5))
    def test_logit_equals_person_period_irls(self, seed):
        r = np.random.default_rng(seed)
        c = checks.random_cohort(r, 300, 4, 3)
        fit = fit_weighted(c, None, "logit")
        Z, y = checks.person_period_design(c)
        np.testing.assert_allclose(fit.theta.vector, logistic_irls(Z, y), atol=1e-6)

    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_first_order_condition(self, small_cohort, link):
        w = np.random.default_rng(1).uniform(0.5, 3, small_cohort.size)
        fit = fit_weighted(small_cohort, w, link)
        from meanscore.model import weighted_derivatives
        _, g, _ = weighted_derivatives(fit.theta, small_cohort, w)
        assert np.max(np.abs(g)) < 1e-8
        assert fit.converged and fit.gradient_norm < 1e-8

    def test_likelihood_path_non_decreasing(self, small_cohort):
        for link in LinkKind:
            path = fit_weighted(small_cohort, None, link).info["loglik_path"]
            assert np.all(np.diff(path) >= -1e-9 * abs(path[0]))

    def test_duplicated_half_weights(self, small_cohort):
        fit = fit_weighted(small_cohort)
        idx = np.concatenate([np.arange(small_cohort.size)] * 2)
        dup = fit_weighted(small_cohort.subset(idx), np.full(idx.size, 0.5))
        np.testing.assert_allclose(dup.theta.vector, fit.theta.vector, atol=1e-9)

    def test_links_differ_but_both_stationary(self, small_cohort):
        a = fit_weighted(small_cohort, None, "logit")
        b = fit_weighted(small_cohort, None, "cloglog")
        assert not np.allclose(a.theta.beta, b.theta.beta)
        assert a.gradient_norm < 1e-8 and b.gradient_norm < 1e-8

    def test_weighted_loglik_at_optimum_beats_perturbation(self, small_cohort):
        fit = fit_weighted(small_cohort)
        base = weighted_loglik(fit.theta, small_cohort)
        v = fit.theta.vector.copy()
        v[-1] += 0.05
        assert weighted_loglik(ThetaParams.from_vector(v, 4, LinkKind.CLOGLOG), small_cohort) < base

    def test_empty_time_index_is_inestimable(self):
        c = Cohort([1, 1, 1], [True, False, True], [[0]] * 3, [[0.1], [0.2], [0.3]], 3)
        with pytest.raises(EstimationError, match="time index"):
            fit_weighted(c)

    def test_period_without_events_warns(self, small_cohort):
        ev = small_cohort.event & (small_cohort.time_index != 2)
        c = Cohort(small_cohort.time_index, ev, small_cohort.surrogate, small_cohort.covariates, 4)
        fit = fit_weighted(c)
        assert any("no events" in w for w in fit.warnings)
        assert fit.theta.alpha[1] < -10

    def test_missing_covariates_rejected(self):
        c = Cohort([1, 2], [True, True], [[0], [0]], [[0.1], [np.nan]], 2)
        with pytest.raises(DataError):
            fit_weighted(c)

    def test_max_iter_reports_last_iterate(self, small_cohort):
        with pytest.raises(ConvergenceError) as info:
            fit_weighted(small_cohort, max_iter=1, tol=1e-300, param_tol=0)
        assert info.value.last is not None

    def test_bad_weights(self, small_cohort):
        with pytest.raises(DataError):
            fit_weighted(small_cohort, np.zeros(small_cohort.size))

    @pytest.mark.slow
    def test_full_cohort_recovers_beta1(self):
        from meanscore import simulation as sim
        cfg = sim.ScenarioConfig(N=8000)
        c = sim.generate_cohort(cfg, cfg.theta(), np.random.default_rng(99))
        fit = fit_weighted(c)
        assert abs(fit.theta.beta[0] - math.log(1.5)) < 3 * 0.067


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10**6), st.sampled_from(["logit", "cloglog"]))
def test_score_is_gradient_property(J, d, seed, link):
    r = np.random.default_rng(seed)
    t, rec = checks.random_theta(r, J, d, link), checks.random_record(r, J, d)
    assert checks.relative_error(score(t, rec), checks.fd_score(t, rec)) < 1e-6
