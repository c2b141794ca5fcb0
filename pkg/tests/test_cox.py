import numpy as np
import pytest
from scipy import optimize

from meanscore import simulation as sim
from meanscore.cox import (ContinuousRecord, MonotoneLikelihoodError, cox_fit, cox_partial_loglik,
                           discretize_equivalence_check, discretize_times)
from meanscore.errors import DataError, EstimationError
from oracles import cox_partial_loglik_ref


def data(seed, n=60, d=2, ties=False):
    r = np.random.default_rng(seed)
    X = r.normal(0, 1, (n, d))
    t = r.exponential(size=n) * np.exp(-X @ np.full(d, 0.5))
    if ties:
        t = np.ceil(t * 4) / 4
    ev = r.random(n) < 0.7
    return t, ev, X


def test_null_covariates_give_zero():
    # covariate independent of time: the estimate stays within noise of zero
    r = np.random.default_rng(1)
    X = np.zeros((400, 1))
    X[::2] = 1.0
    fit = cox_fit(time=r.exponential(size=400), event=np.ones(400, bool), X=X)
    assert abs(fit.theta[0]) < 3 * fit.se[0]


def test_balanced_covariate_exactly_zero():
    # x alternates +1/-1 within every tied time, so the score at zero vanishes
    t = np.repeat(np.arange(1.0, 11.0), 2)
    X = np.tile([1.0, -1.0], 10)[:, None]
    fit = cox_fit(time=t, event=np.ones(20, bool), X=X)
    assert fit.theta[0] == pytest.approx(0.0, abs=1e-12)


def test_brute_force_partial_likelihood_small():
    t, ev, X = data(2, n=20)
    fit = cox_fit(time=t, event=ev, X=X)
    # independent evaluation and optimisation of the partial likelihood
    res = optimize.minimize(lambda b: -cox_partial_loglik_ref(b, t, ev, X), np.zeros(2), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    np.testing.assert_allclose(fit.theta, res.x, atol=1e-5)
    assert cox_partial_loglik(fit.theta, t, ev, X) == pytest.approx(cox_partial_loglik_ref(fit.theta, t, ev, X))


@pytest.mark.parametrize("ties", [False, True])
def test_loglik_matches_enumeration_with_weights(ties):
    t, ev, X = data(3, ties=ties)
    w = np.random.default_rng(4).uniform(0.5, 3, t.size)
    b = np.array([0.3, -0.2])
    assert cox_partial_loglik(b, t, ev, X, w) == pytest.approx(cox_partial_loglik_ref(b, t, ev, X, w), rel=1e-12)


def test_weight_scaling_invariance():
    t, ev, X = data(5, n=200, ties=True)
    w = np.random.default_rng(6).uniform(1, 4, t.size)
    a = cox_fit(time=t, event=ev, X=X, weights=w)
    b = cox_fit(time=t, event=ev, X=X, weights=17.0 * w)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-8)


def test_monotone_time_transform_invariance():
    t, ev, X = data(7, n=150)
    a = cox_fit(time=t, event=ev, X=X)
    b = cox_fit(time=np.exp(3 * t) + t ** 3, event=ev, X=X)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-10)


def test_gradient_small_at_optimum():
    t, ev, X = data(8, n=150)
    fit = cox_fit(time=t, event=ev, X=X, tol=1e-10)
    from meanscore import kernels
    _, g, _ = kernels.cox_accumulate(t, ev, X, np.ones(t.size), fit.theta)
    assert np.max(np.abs(g)) < 1e-8


def test_records_interface_matches_arrays():
    t, ev, X = data(9)
    recs = [ContinuousRecord(float(a), bool(b), tuple(x)) for a, b, x in zip(t, ev, X)]
    np.testing.assert_allclose(cox_fit(recs).theta, cox_fit(time=t, event=ev, X=X).theta)


def test_separation_detected():
    t = np.arange(1.0, 21.0)
    X = (t <= 10).astype(float)[:, None]  # every early failure has x = 1
    ev = np.ones(20, bool)
    with pytest.raises(MonotoneLikelihoodError):
        cox_fit(time=t, event=ev, X=X)


def test_input_validation():
    with pytest.raises(DataError):
        ContinuousRecord(-1.0, True, (0.0,))
    with pytest.raises(DataError):
        ContinuousRecord(1.0, True, (0.0,), weight=0.0)
    with pytest.raises(EstimationError):
        cox_fit(time=[1.0, 2.0], event=[False, False], X=[[0.0], [1.0]])
    with pytest.raises(DataError):
        cox_fit(time=[1.0, np.nan], event=[True, True], X=[[0.0], [1.0]])


def test_discretize_times():
    idx, ev = discretize_times([0.2, 0.5, 1.2, 3.5], [True, True, True, True], [0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    assert idx.tolist() == [1, 1, 3, 6]
    assert ev.tolist() == [True, True, True, False]


def test_equivalence_null_data():
    r = np.random.default_rng(10)
    X = r.normal(0, 1, (3000, 2))
    t, ev = sim.piecewise_exponential_times(r, X, [-1.5] * 4, [0.0, 0.0], [1, 2, 3, 4])
    rep = discretize_equivalence_check(t, ev, X, [1, 2, 3, 4])
    assert rep.applicable and rep.passed
    assert np.all(np.abs(rep.cox_beta) < 3 * rep.cox_se)


def test_equivalence_single_interval_not_applicable():
    t, ev, X = data(11)
    rep = discretize_equivalence_check(t, ev, X, [10.0])
    assert not rep.applicable and rep.passed is None


@pytest.mark.slow
def test_equivalence_on_simulated_cohort():
    r = np.random.default_rng(12)
    X = sim.gen_covariates(r, 8000)
    t, ev = sim.piecewise_exponential_times(r, X, sim.TABULATED_ALPHA[0.5], sim.TRUE_BETA, np.arange(1, 7.0))
    rep = discretize_equivalence_check(t, ev, X, np.arange(1, 7.0))
    assert rep.passed
