"""Two-phase mean score estimator and its sandwich variance.

Validated subjects are weighted by the inverse of the empirical stratum
sampling probability ``n(s)/N(s)``; the variance adds to the complete-data
information the inflation caused by sampling within strata.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, SingularMatrixError
from .model import Cohort, FitResult, LinkKind, ThetaParams, fit_weighted, score_matrix, weighted_derivatives
from .strata import StratumTable, build_strata

logger = logging.getLogger(__name__)


def within_stratum_covariances(scores, ids, n_strata, ddof=1):
    """Sample covariance of the score rows within each stratum.

    Returns ``(cov, counts)`` with ``cov`` of shape ``(n_strata, P, P)``.
    Strata with ``counts <= ddof`` get a zero matrix.
    """
    scores = np.asarray(scores, dtype=float)
    P = scores.shape[1]
    counts = np.bincount(ids, minlength=n_strata)
    sums = np.zeros((n_strata, P))
    np.add.at(sums, ids, scores)
    means = sums / np.maximum(counts, 1)[:, None]
    centred = scores - means[ids]
    cov = np.zeros((n_strata, P, P))
    np.add.at(cov, ids, centred[:, :, None] * centred[:, None, :])
    denom = counts - ddof
    ok = denom > 0
    cov[ok] /= denom[ok][:, None, None]
    cov[~ok] = 0.0
    return cov, counts


@dataclass
class SandwichParts:
    info: np.ndarray
    omega: np.ndarray
    covariance: np.ndarray
    singleton_strata: list = field(default_factory=list)


def sandwich_components(theta: ThetaParams, cohort: Cohort, validated, strata: StratumTable) -> SandwichParts:
    N = cohort.size
    validated = np.asarray(validated)
    sub = cohort.subset(validated)
    s_ids = strata.ids[validated]
    w = strata.N[s_ids] / strata.n[s_ids]

    _, _, hess = weighted_derivatives(theta, sub, w)
    info = -hess / N
    info = 0.5 * (info + info.T)

    U = score_matrix(theta, sub)
    S = len(strata.keys)
    cov_s, counts = within_stratum_covariances(U, s_ids, S, ddof=1)
    singletons = [strata.keys[s] for s in range(S) if counts[s] == 1]
    omega = np.zeros_like(info)
    for s in np.flatnonzero(counts >= 2):
        omega += (strata.N[s] / N) * (strata.N[s] / strata.n[s] - 1.0) * cov_s[s]

    try:
        inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(info)
        raise SingularMatrixError(
            f"information matrix is singular (null direction {np.round(vecs[:, 0], 4).tolist()})",
            direction=vecs[:, 0]) from None
    sigma = inv + inv @ omega @ inv
    cov = sigma / N
    return SandwichParts(info, omega, 0.5 * (cov + cov.T), singletons)


def sandwich_variance(theta: ThetaParams, cohort: Cohort, validated, strata: StratumTable) -> np.ndarray:
    """``(I^-1 + I^-1 Omega I^-1) / N`` evaluated at ``theta``.

    ``I`` is the inverse-probability-weighted average of the negative
    Hessian over validated subjects.  ``Omega`` sums, over strata,
    ``N(s)/N * (1/pi(s) - 1)`` times the within-stratum sample covariance
    of the validated scores.  Strata holding a single validated subject
    contribute nothing to ``Omega``.
    """
    return sandwich_components(theta, cohort, validated, strata).covariance


def mean_score_fit(cohort: Cohort, validated, link=LinkKind.CLOGLOG, strict: bool = False,
                   **solver) -> FitResult:
    """Inverse-probability-weighted fit over the validated subjects.

    Parameters
    ----------
    cohort : Cohort
        Phase-one data for all ``N`` subjects.
    validated : array_like of int
        Indices of the phase-two subjects (must carry covariates).
    link : LinkKind or str
    strict : bool
        Raise when a stratum has phase-one subjects but no validated ones
        (``pi(s) = 0``).  Otherwise fit anyway and record a warning.
    **solver
        Passed to :func:`meanscore.model.fit_weighted`.
    """
    link = LinkKind.parse(link)
    table = build_strata(cohort, validated)
    if table.validated.size == 0:
        raise EstimationError("no validated subjects")
    uncovered = table.uncovered()
    warnings = []
    if uncovered:
        total = int(sum(table.N[table.index(k)] for k in uncovered))
        msg = (f"{len(uncovered)} strata with zero sampling probability "
               f"({total} phase-one subjects): " + ", ".join(map(str, uncovered[:10])))
        if strict:
            raise EstimationError("positivity violated: " + msg)
        warnings.append(msg)
        logger.info(msg)

    sub = cohort.subset(table.validated)
    weights = table.weights()
    fit = fit_weighted(sub, weights, link, **solver)
    parts = sandwich_components(fit.theta, cohort, table.validated, table)
    if parts.singleton_strata:
        msg = (f"{len(parts.singleton_strata)} strata with a single validated subject "
               "contribute no score variance")
        warnings.append(msg)
        logger.info(msg)

    fit.covariance = parts.covariance
    fit.warnings = fit.warnings + warnings
    fit.info.update({
        "strata": table,
        "uncovered_strata": uncovered,
        "singleton_strata": parts.singleton_strata,
        "information": parts.info,
        "omega": parts.omega,
        "validated": table.validated,
    })
    return fit
