"""Synthetic cohort modelled on a paediatric renal tumour relapse study.

The real cohort is not redistributable, so this module draws a look-alike:
central histology (the expensive exposure), a misclassified local
histology reading (the surrogate), stage, age and tumour diameter, with
relapse over six half-year intervals and follow-up ending at three years.
Coefficients default to reference full-cohort fits of the reduced cohort.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import design
from .cox import cox_fit
from .model import Cohort, LinkKind, ThetaParams, fit_weighted
from .simulation import MonteCarloSummary, gen_outcomes, piecewise_exponential_times, run_estimators, summarize

COVARIATE_NAMES = ("histology", "stage", "age", "diameter", "histology_x_stage")
BOUNDARIES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
DISCRETE_ALPHA = (-4.028, -3.876, -4.336, -5.005, -5.353, -5.719)
DISCRETE_BETA = (1.058, 0.280, 0.063, 0.032, 0.636)
COX_BETA = (1.027, 0.292, 0.064, 0.022, 0.620)
INTERACTION_INDEX = len(DISCRETE_ALPHA) + 4


@dataclass(frozen=True)
class NWTSLikeConfig:
    N: int = 3757
    p_unfavourable: float = 0.12
    p_late_stage: float = 0.45
    age_mean: float = 3.5
    age_sd: float = 2.5
    diameter_mean: float = 12.0
    diameter_sd: float = 3.5
    sensitivity: float = 0.75
    false_positive: float = 0.02
    p_dropout: float = 0.0


def gen_nwts_covariates(rng: np.random.Generator, config: NWTSLikeConfig = NWTSLikeConfig(),
                        N: Optional[int] = None):
    """Returns ``(X, local)`` with ``X`` holding the five model columns."""
    N = config.N if N is None else N
    uh = (rng.random(N) < config.p_unfavourable).astype(float)
    stage = (rng.random(N) < config.p_late_stage).astype(float)
    age = np.clip(rng.gamma((config.age_mean / config.age_sd) ** 2,
                            config.age_sd ** 2 / config.age_mean, N), 0.05, 16.0)
    diameter = np.clip(rng.normal(config.diameter_mean, config.diameter_sd, N), 1.0, 30.0)
    X = np.column_stack([uh, stage, age, diameter, uh * stage])
    p_local = np.where(uh > 0, config.sensitivity, config.false_positive)
    local = (rng.random(N) < p_local).astype(np.int64)
    return X, local


def discrete_cohort(rng: np.random.Generator, config: NWTSLikeConfig = NWTSLikeConfig(),
                    alpha=DISCRETE_ALPHA, beta=DISCRETE_BETA) -> Cohort:
    """Grouped-time cohort with local histology as the surrogate."""
    X, local = gen_nwts_covariates(rng, config)
    theta = ThetaParams(np.asarray(alpha, float), np.asarray(beta, float), LinkKind.CLOGLOG)
    y, ev = gen_outcomes(rng, X, theta)
    return Cohort(y, ev, local.reshape(-1, 1), X, theta.n_times, COVARIATE_NAMES)


def continuous_cohort(rng: np.random.Generator, config: NWTSLikeConfig = NWTSLikeConfig(),
                      alpha=DISCRETE_ALPHA, beta=COX_BETA, boundaries=BOUNDARIES):
    """Continuous relapse times plus the matching grouped cohort.

    With ``config.p_dropout > 0`` that fraction of subjects is lost to
    follow-up at a uniform time before the end of study.  Returns
    ``(time, event, cohort)``; ``cohort`` carries the interval indices
    used for stratification.
    """
    X, local = gen_nwts_covariates(rng, config)
    time, event = piecewise_exponential_times(rng, X, alpha, beta, boundaries)
    if config.p_dropout > 0:
        lost = rng.random(time.size) < config.p_dropout
        when = rng.uniform(0.0, boundaries[-1], time.size)
        cut = lost & (when < time)
        time = np.where(cut, when, time)
        event = event & ~cut
    idx = np.searchsorted(np.asarray(boundaries), time, side="left") + 1
    cohort = Cohort(idx, event, local.reshape(-1, 1), X, len(boundaries), COVARIATE_NAMES)
    return time, event, cohort


def subsampling_study(cohort: Cohort, n: int = 400, replications: int = 200, seed: int = 0,
                      estimators: Sequence[str] = ("CC-SRS", "MS-SRS", "MS-BAL", "MS-A", "MS-O"),
                      target_index: int = INTERACTION_INDEX, pilot_fraction: float = 0.5,
                      undersample_cap: Optional[int] = None) -> MonteCarloSummary:
    """Repeated phase-two subsamples from one fixed cohort.

    The reference values are the full-cohort estimates; MS-O designs with
    nuisance quantities computed from the full cohort at those values.
    """
    full = fit_weighted(cohort, None, LinkKind.CLOGLOG)
    oracle = design.oracle_nuisance(cohort, LinkKind.CLOGLOG, full.theta)
    results = []
    for r in range(replications):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        results.append(run_estimators(cohort, n, rng, estimators=estimators, target_index=target_index,
                                      pilot_fraction=pilot_fraction, oracle=oracle,
                                      undersample_cap=undersample_cap))
    return summarize(results, tuple(estimators), full.theta.vector, full.theta.names(cohort.covariate_names))


def cox_subsampling_study(time, event, cohort: Cohort, n: int = 400, replications: int = 200,
                          seed: int = 0, estimators: Sequence[str] = ("CC-SRS", "MS-BAL", "MS-A", "MS-O"),
                          target_index: int = INTERACTION_INDEX,
                          pilot_fraction: float = 0.5) -> MonteCarloSummary:
    """Weighted Cox fits on samples chosen by the grouped-time designs.

    ``CC-SRS`` here is the unweighted Cox fit on a simple random sample; the
    stratified designs use inverse sampling-fraction weights.
    """
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    X = cohort.covariates

    def fitter(_cohort, validated, weights):
        return cox_fit(time=time[validated], event=event[validated], X=X[validated], weights=weights)

    reference = cox_fit(time=time, event=event, X=X)
    disc = fit_weighted(cohort, None, LinkKind.CLOGLOG)
    oracle = design.oracle_nuisance(cohort, LinkKind.CLOGLOG, disc.theta)
    results = []
    for r in range(replications):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        results.append(run_estimators(cohort, n, rng, estimators=estimators, target_index=target_index,
                                      pilot_fraction=pilot_fraction, oracle=oracle, fitter=fitter))
    return summarize(results, tuple(estimators), reference.theta, cohort.covariate_names)
