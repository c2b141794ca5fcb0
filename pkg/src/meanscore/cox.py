"""Inverse-probability-weighted Cox regression with Breslow ties.

Used to judge how designs built for the grouped-time model carry over to
an analysis on the original continuous time scale, and to cross-check the
cloglog discrete model against the Cox model it approximates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConvergenceError, DataError, EstimationError, SingularMatrixError
from .model import Cohort, FitResult, LinkKind, fit_weighted

logger = logging.getLogger(__name__)


class MonotoneLikelihoodError(EstimationError):
    """The partial likelihood keeps increasing along ``direction`` (separation)."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


@dataclass(frozen=True)
class ContinuousRecord:
    time: float
    event: bool
    covariates: tuple
    weight: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.time) and self.time > 0):
            raise DataError(f"time must be positive and finite, got {self.time}")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise DataError(f"weight must be positive and finite, got {self.weight}")
        if not np.all(np.isfinite(self.covariates)):
            raise DataError("covariates must be finite")


def records_to_arrays(records: Sequence[ContinuousRecord]):
    if not records:
        raise DataError("no records")
    time = np.array([r.time for r in records], dtype=float)
    event = np.array([bool(r.event) for r in records])
    X = np.array([np.asarray(r.covariates, dtype=float) for r in records])
    w = np.array([r.weight for r in records], dtype=float)
    return time, event, X.reshape(len(records), -1), w


def cox_partial_loglik(beta, time, event, X, weights=None):
    """Weighted Breslow log partial likelihood (value only)."""
    time, event, X, w = _validate(time, event, X, weights)
    return kernels.cox_accumulate(time, event, X, w, np.asarray(beta, float))[0]


def _validate(time, event, X, weights):
    time = np.asarray(time, dtype=float).reshape(-1)
    n = time.shape[0]
    event = np.asarray(event, dtype=bool).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if event.shape[0] != n or X.shape[0] != n or w.shape[0] != n:
        raise DataError("time, event, covariates and weights differ in length")
    if not (np.all(np.isfinite(time)) and np.all(np.isfinite(X)) and np.all(np.isfinite(w))):
        raise DataError("non-finite values in Cox inputs")
    if np.any(time <= 0):
        raise DataError("event times must be positive")
    if np.any(w <= 0):
        raise DataError("weights must be positive")
    if not event.any():
        raise EstimationError("Cox model needs at least one event")
    return time, event, X, w


def cox_fit(records=None, tol: float = 1e-8, max_iter: int = 100, *, time=None, event=None,
            X=None, weights=None, max_halvings: int = 20, separation_bound: float = 30.0) -> FitResult:
    """Maximise the weighted Breslow partial likelihood by damped Newton steps.

    Pass either a list of :class:`ContinuousRecord` or the arrays ``time``,
    ``event``, ``X`` and optional ``weights``.  Convergence is declared when
    the gradient, scaled by the total weight, falls below ``tol`` or the
    largest parameter change falls below 1e-10.  The returned ``theta`` is
    the coefficient vector and ``covariance`` the inverse of the weighted
    partial-likelihood information.

    Raises
    ------
    MonotoneLikelihoodError
        A coefficient diverges (``|beta_k| > separation_bound``) while the
        likelihood still increases, or the fit stops with ``|beta_k| > 10``
        and a standard error above ``10 |beta_k|``; either way some
        covariate separates the risk sets.
    ConvergenceError
        ``max_iter`` reached.
    """
    if records is not None:
        time, event, X, weights = records_to_arrays(records)
    time, event, X, w = _validate(time, event, X, weights)
    d = X.shape[1]
    scale = w.sum()
    beta = np.zeros(d)
    ll, g, H = kernels.cox_accumulate(time, event, X, w, beta)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g), initial=0.0) / scale < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            vals, vecs = np.linalg.eigh(-H)
            direction = vecs[:, 0]
            if g @ direction < 0:
                direction = -direction
            raise MonotoneLikelihoodError(
                "partial-likelihood information is singular; likely monotone likelihood along "
                f"{np.round(direction, 4).tolist()}", direction)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            ll_c, g_c, H_c = kernels.cox_accumulate(time, event, X, w, cand)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            raise ConvergenceError("step-halving failed to increase the partial likelihood",
                                   last=beta, iterations=it, gradient_norm=float(np.linalg.norm(g)))
        change = np.max(np.abs(cand - beta), initial=0.0)
        beta, ll, g, H = cand, ll_c, g_c, H_c
        path.append(ll)
        if np.max(np.abs(beta), initial=0.0) > separation_bound:
            direction = beta / np.linalg.norm(beta)
            raise MonotoneLikelihoodError(
                f"coefficients diverge (max |beta| = {np.max(np.abs(beta)):.1f}); a covariate "
                f"separates the risk sets along {np.round(direction, 4).tolist()}", direction)
        if change < 1e-10:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations",
                               last=beta, iterations=it, gradient_norm=float(np.linalg.norm(g)))
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(-H)
        raise SingularMatrixError("partial-likelihood information is singular", vecs[:, 0]) from None
    # The gradient decays like exp(-|beta|) along a separating direction, so
    # the iteration can stop at a large finite value.  Such a stopping point
    # shows up as a standard error dwarfing an already large coefficient.
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    runaway = (np.abs(beta) > 10.0) & (se > 10.0 * np.abs(beta))
    if np.any(runaway):
        direction = np.where(runaway, np.sign(beta), 0.0)
        direction = direction / np.linalg.norm(direction)
        raise MonotoneLikelihoodError(
            f"coefficients {np.flatnonzero(runaway).tolist()} stopped at a flat ridge "
            f"(max |beta| = {np.max(np.abs(beta)):.1f}); a covariate separates the risk sets", direction)
    return FitResult(beta, 0.5 * (cov + cov.T), True, it, float(np.linalg.norm(g)), float(ll),
                     weights=w, info={"loglik_path": path})


# ---------------------------------------------------------------------------
# grouped-time comparison


def discretize_times(time, event, boundaries):
    """Interval index (smallest ``j`` with ``time <= boundaries[j-1]``).

    Times beyond the last boundary are censored there.
    """
    b = np.asarray(boundaries, dtype=float)
    if b.size == 0 or np.any(np.diff(b) <= 0) or b[0] <= 0:
        raise DataError("boundaries must be positive and strictly increasing")
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    beyond = time > b[-1]
    idx = np.searchsorted(b, np.minimum(time, b[-1]), side="left") + 1
    return idx.astype(np.int64), event & ~beyond


@dataclass
class EquivalenceReport:
    applicable: bool
    n_times: int
    cox_beta: Optional[np.ndarray] = None
    cox_se: Optional[np.ndarray] = None
    discrete_beta: Optional[np.ndarray] = None
    discrete_se: Optional[np.ndarray] = None
    difference: Optional[np.ndarray] = None
    combined_se: Optional[np.ndarray] = None
    passed: Optional[bool] = None
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        def conv(v):
            return v.tolist() if isinstance(v, np.ndarray) else v
        return {k: conv(v) for k, v in self.__dict__.items()}


def discretize_equivalence_check(time, event, X, boundaries, weights=None,
                                 threshold: float = 3.0) -> EquivalenceReport:
    """Compare Cox and grouped-time cloglog coefficients on the same data.

    Both fits censor at the last boundary.  Each coefficient passes when the
    two estimates differ by less than ``threshold`` combined standard errors
    (``sqrt(se_cox^2 + se_discrete^2)``).  A single interval leaves no
    time variation for the discrete model, so the check is reported as not
    applicable.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    X = np.asarray(X, dtype=float)
    b = np.asarray(boundaries, dtype=float)
    idx, ev = discretize_times(time, event, b)
    J = b.size
    if J < 2:
        return EquivalenceReport(False, J, notes=["single interval: grouped-time model has J=1"])
    cox = cox_fit(time=np.minimum(time, b[-1]), event=ev, X=X, weights=weights)
    cohort = Cohort(idx, ev, np.zeros((idx.size, 1), dtype=np.int64), X, J)
    disc = fit_weighted(cohort, weights, LinkKind.CLOGLOG)
    db = disc.theta.beta
    dse = disc.se[J:]
    diff = cox.theta - db
    comb = np.sqrt(cox.se ** 2 + dse ** 2)
    return EquivalenceReport(True, J, cox.theta, cox.se, db, dse, diff, comb,
                             bool(np.all(np.abs(diff) < threshold * comb)))
