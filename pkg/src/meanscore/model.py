"""Discrete-time proportional hazards model.

The hazard at discrete time ``t_j`` for covariates ``x`` satisfies
``log g(lambda_j(x)) = alpha_j + beta' x`` where ``g`` is the odds
transform (logit link) or ``-log(1 - u)`` (complementary log-log link).
A subject observed up to time index ``J(i)`` contributes one Bernoulli
trial per at-risk interval, with an event only in the last one when
``event`` is true.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConvergenceError, DataError, EstimationError, SingularMatrixError

logger = logging.getLogger(__name__)

HAZARD_EPS = 1e-12


class LinkKind(enum.Enum):
    LOGIT = "logit"
    CLOGLOG = "cloglog"

    @classmethod
    def parse(cls, value) -> "LinkKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise DataError(f"unknown link {value!r}; expected 'logit' or 'cloglog'") from None

    @property
    def code(self) -> int:
        return 0 if self is LinkKind.LOGIT else 1

    def g(self, u):
        """The monotone transform applied to the hazard."""
        u = np.asarray(u, dtype=float)
        if self is LinkKind.LOGIT:
            return u / (1.0 - u)
        return -np.log1p(-u)

    def inverse(self, eta):
        """Map the linear predictor ``log g(lambda)`` back to a hazard in (0, 1)."""
        eta = np.asarray(eta, dtype=float)
        with np.errstate(over="ignore"):
            if self is LinkKind.LOGIT:
                lam = 0.5 * (1.0 + np.tanh(0.5 * eta))
            else:
                lam = -np.expm1(-np.exp(eta))
        return np.clip(lam, HAZARD_EPS, 1.0 - HAZARD_EPS)

    def linear_predictor(self, lam):
        """``log g(lambda)``: the scale on which ``alpha`` lives."""
        return np.log(self.g(lam))


@dataclass(frozen=True)
class ThetaParams:
    """Baseline parameters ``alpha`` (one per time index) and log hazard ratios ``beta``."""

    alpha: np.ndarray
    beta: np.ndarray
    link: LinkKind = LinkKind.CLOGLOG

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise DataError("theta has non-finite entries")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "link", LinkKind.parse(self.link))

    @property
    def n_times(self) -> int:
        return self.alpha.shape[0]

    @property
    def dim(self) -> int:
        return self.beta.shape[0]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @classmethod
    def from_vector(cls, vec, n_times: int, link) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:n_times], vec[n_times:], link)

    def baseline_hazard(self) -> np.ndarray:
        return self.link.inverse(self.alpha)

    def names(self, covariate_names: Optional[Sequence[str]] = None) -> list[str]:
        if covariate_names is None:
            covariate_names = [f"beta_{k + 1}" for k in range(self.dim)]
        return [f"alpha_{j + 1}" for j in range(self.n_times)] + list(covariate_names)


@dataclass(frozen=True)
class SubjectRecord:
    time_index: int
    event: bool
    surrogate: tuple = ()
    covariates: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.time_index) < 1:
            raise DataError(f"time_index must be >= 1, got {self.time_index}")
        object.__setattr__(self, "time_index", int(self.time_index))
        object.__setattr__(self, "event", bool(self.event))
        object.__setattr__(self, "surrogate", tuple(int(z) for z in np.atleast_1d(self.surrogate)))
        if self.covariates is not None:
            object.__setattr__(self, "covariates", np.array(self.covariates, dtype=float).reshape(-1))

    def event_indicators(self) -> np.ndarray:
        """``D_ij`` for ``j = 1..time_index``."""
        d = np.zeros(self.time_index)
        if self.event:
            d[-1] = 1.0
        return d


@dataclass(frozen=True)
class Cohort:
    """Column-oriented phase-one cohort.

    ``covariates`` has a row for every subject; rows of unvalidated subjects
    are NaN.  ``time_index`` is 1-based.
    """

    time_index: np.ndarray
    event: np.ndarray
    surrogate: np.ndarray
    covariates: np.ndarray
    n_times: int
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.time_index, dtype=np.int64).reshape(-1)
        n = y.shape[0]
        ev = np.asarray(self.event, dtype=bool).reshape(-1)
        z = np.asarray(self.surrogate, dtype=np.int64)
        if z.ndim == 1:
            z = z.reshape(n, -1) if n else z.reshape(0, 1)
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, 0)
        if ev.shape[0] != n or z.shape[0] != n or X.shape[0] != n:
            raise DataError("cohort columns have different lengths")
        if n and (y.min() < 1 or y.max() > self.n_times):
            raise DataError(f"time indices must lie in 1..{self.n_times}")
        for arr in (y, ev, z, X):
            arr.setflags(write=False)
        object.__setattr__(self, "time_index", y)
        object.__setattr__(self, "event", ev)
        object.__setattr__(self, "surrogate", z)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "n_times", int(self.n_times))
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(X.shape[1]))
        object.__setattr__(self, "covariate_names", names)

    @property
    def size(self) -> int:
        return self.time_index.shape[0]

    @property
    def dim(self) -> int:
        return self.covariates.shape[1]

    @property
    def max_followup_index(self) -> int:
        return self.n_times

    def has_covariates(self) -> np.ndarray:
        return np.all(np.isfinite(self.covariates), axis=1)

    def subset(self, index) -> "Cohort":
        index = np.asarray(index)
        return Cohort(
            self.time_index[index], self.event[index], self.surrogate[index],
            self.covariates[index], self.n_times, self.covariate_names,
        )

    def with_covariates_only(self, index) -> "Cohort":
        """Mask covariates of everyone outside ``index`` (simulates phase one)."""
        X = np.full_like(self.covariates, np.nan)
        index = np.asarray(index)
        X[index] = self.covariates[index]
        return Cohort(self.time_index, self.event, self.surrogate, X, self.n_times,
                      self.covariate_names)

    def records(self) -> list[SubjectRecord]:
        ok = self.has_covariates()
        return [
            SubjectRecord(int(self.time_index[i]), bool(self.event[i]),
                          tuple(self.surrogate[i]), self.covariates[i] if ok[i] else None)
            for i in range(self.size)
        ]

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord], n_times: Optional[int] = None,
                     dim: Optional[int] = None, covariate_names=()) -> "Cohort":
        if dim is None:
            dims = {len(r.covariates) for r in records if r.covariates is not None}
            if len(dims) > 1:
                raise DataError("records have covariate vectors of different lengths")
            dim = dims.pop() if dims else 0
        X = np.full((len(records), dim), np.nan)
        for i, r in enumerate(records):
            if r.covariates is not None:
                if len(r.covariates) != dim:
                    raise DataError(f"record {i} has {len(r.covariates)} covariates, expected {dim}")
                X[i] = r.covariates
        y = np.array([r.time_index for r in records], dtype=np.int64)
        if n_times is None:
            n_times = int(y.max()) if len(records) else 0
        z = np.array([r.surrogate for r in records], dtype=np.int64).reshape(len(records), -1)
        return cls(y, np.array([r.event for r in records]), z, X, n_times, covariate_names)


@dataclass
class FitResult:
    """Outcome of a Newton-Raphson fit.

    ``covariance`` is on the per-estimate scale: for ``fit_weighted`` the
    inverse of the weighted information, for ``mean_score_fit`` the
    sandwich variance.
    """

    theta: ThetaParams
    covariance: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    loglik: float
    weights: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


# ---------------------------------------------------------------------------
# single-record operations


def _check_x(theta: ThetaParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != theta.dim:
        raise DataError(f"covariate vector has length {x.shape[0]}, theta expects {theta.dim}")
    return x


def hazard(theta: ThetaParams, j: int, x) -> float:
    """Conditional hazard ``lambda_j(x)``; ``j`` is 1-based."""
    x = _check_x(theta, x)
    if not 1 <= j <= theta.n_times:
        raise DataError(f"time index {j} outside 1..{theta.n_times}")
    return float(theta.link.inverse(theta.alpha[j - 1] + theta.beta @ x))


def survival_curve(theta: ThetaParams, x) -> np.ndarray:
    """``S_j(x) = P(T >= t_j | x)`` for ``j = 1..J``."""
    x = _check_x(theta, x)
    lam = theta.link.inverse(theta.alpha + theta.beta @ x)
    return np.concatenate([[1.0], np.cumprod(1.0 - lam)[:-1]])


def _record_arrays(theta: ThetaParams, rec: SubjectRecord):
    if rec.covariates is None:
        raise DataError("record has no validated covariates")
    x = _check_x(theta, rec.covariates)
    if rec.time_index > theta.n_times:
        raise DataError(f"time index {rec.time_index} exceeds J={theta.n_times}")
    return (np.array([rec.time_index]), np.array([rec.event], dtype=np.uint8), x[None, :])


def loglik(theta: ThetaParams, rec: SubjectRecord) -> float:
    y, ev, X = _record_arrays(theta, rec)
    return float(kernels.subject_loglik(y, ev, X, theta.alpha, theta.beta, theta.link.code)[0])


def score(theta: ThetaParams, rec: SubjectRecord) -> np.ndarray:
    y, ev, X = _record_arrays(theta, rec)
    return kernels.subject_scores(y, ev, X, theta.alpha, theta.beta, theta.link.code)[0]


def hessian(theta: ThetaParams, rec: SubjectRecord) -> np.ndarray:
    y, ev, X = _record_arrays(theta, rec)
    _, _, H = kernels.accumulate(y, ev, X, np.ones(1), theta.alpha, theta.beta,
                                 theta.link.code, order=2)
    return H


# ---------------------------------------------------------------------------
# cohort-level operations


def _validated_arrays(cohort: Cohort):
    ok = cohort.has_covariates()
    if not np.all(ok):
        bad = np.flatnonzero(~ok)[:5].tolist()
        raise DataError(f"records without covariates passed to the fitter (e.g. rows {bad})")
    return cohort.time_index, cohort.event.astype(np.uint8), cohort.covariates


def weighted_loglik(theta: ThetaParams, cohort: Cohort, weights=None) -> float:
    y, ev, X = _validated_arrays(cohort)
    w = np.ones(cohort.size) if weights is None else np.asarray(weights, dtype=float)
    ll, _, _ = kernels.accumulate(y, ev, X, w, theta.alpha, theta.beta, theta.link.code, order=0)
    return ll


def weighted_derivatives(theta: ThetaParams, cohort: Cohort, weights=None):
    """Weighted log-likelihood, score and Hessian summed over the cohort."""
    y, ev, X = _validated_arrays(cohort)
    w = np.ones(cohort.size) if weights is None else np.asarray(weights, dtype=float)
    return kernels.accumulate(y, ev, X, w, theta.alpha, theta.beta, theta.link.code, order=2)


def score_matrix(theta: ThetaParams, cohort: Cohort) -> np.ndarray:
    """Unweighted per-subject scores, one row per subject."""
    y, ev, X = _validated_arrays(cohort)
    return kernels.subject_scores(y, ev, X, theta.alpha, theta.beta, theta.link.code)


def risk_table(time_index, event, weights, n_times):
    """Weighted at-risk and event totals per time index."""
    y = np.asarray(time_index)
    w = np.asarray(weights, dtype=float)
    events = np.bincount(y[np.asarray(event, bool)] - 1, weights=w[np.asarray(event, bool)],
                         minlength=n_times)[:n_times]
    exits = np.bincount(y - 1, weights=w, minlength=n_times)[:n_times]
    at_risk = exits[::-1].cumsum()[::-1]
    return at_risk, events


def initial_theta(cohort: Cohort, weights, link: LinkKind) -> ThetaParams:
    at_risk, events = risk_table(cohort.time_index, cohort.event, weights, cohort.n_times)
    n = max(cohort.size, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(at_risk > 0, events / at_risk, 0.5)
    lam = np.clip(raw, 1.0 / (2 * n), 1.0 - 1.0 / (2 * n))
    return ThetaParams(link.linear_predictor(lam), np.zeros(cohort.dim), link)


def fit_weighted(cohort: Cohort, weights=None, link=LinkKind.CLOGLOG,
                 init: Optional[ThetaParams] = None, tol: float = 1e-8,
                 max_iter: int = 100, param_tol: float = 1e-10,
                 max_halvings: int = 20) -> FitResult:
    """Maximise the weighted log-likelihood by damped Newton-Raphson.

    Parameters
    ----------
    cohort : Cohort
        Subjects to fit; every row must carry covariates.
    weights : array_like, optional
        Positive per-subject weights (inverse sampling probabilities).
        Unit weights give the ordinary MLE.
    link : LinkKind or str
    init : ThetaParams, optional
        Starting value; defaults to link-transformed empirical hazards
        and ``beta = 0``.
    tol : float
        Convergence when ``max |weighted score| < tol``.
    max_iter : int
    param_tol : float
        Alternatively converged when no parameter moves more than this.

    Returns
    -------
    FitResult
        ``covariance`` is the inverse of the weighted observed information.

    Raises
    ------
    EstimationError
        A time index has no subjects at risk.
    ConvergenceError
        ``max_iter`` reached without convergence.
    """
    link = LinkKind.parse(link)
    y, ev, X = _validated_arrays(cohort)
    w = np.ones(cohort.size) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != cohort.size:
        raise DataError("weights and cohort have different lengths")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise DataError("weights must be finite and positive")
    J = cohort.n_times

    warnings = []
    at_risk, events = risk_table(y, ev.astype(bool), w, J)
    empty = np.flatnonzero(at_risk <= 0)
    if empty.size:
        raise EstimationError(
            f"alpha inestimable at time index {[int(j) + 1 for j in empty]}: no subjects at risk"
        )
    no_event = np.flatnonzero(events <= 0)
    if no_event.size:
        warnings.append(f"no events at time index {[int(j) + 1 for j in no_event]}; "
                        "alpha diverges toward -inf")

    theta = init if init is not None else initial_theta(cohort, w, link)
    if theta.link is not link:
        theta = ThetaParams(theta.alpha, theta.beta, link)
    if theta.n_times != J or theta.dim != cohort.dim:
        raise DataError("initial theta does not match cohort dimensions")
    vec = theta.vector
    code = link.code

    def evaluate(v, order):
        return kernels.accumulate(y, ev, X, w, v[:J], v[J:], code, order=order)

    ll, grad, hess = evaluate(vec, 2)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise SingularMatrixError("singular Hessian during Newton iteration",
                                      direction=_null_direction(-hess)) from None
        t = 1.0
        slack = 1e-12 * (1.0 + abs(ll))
        for _ in range(max_halvings + 1):
            cand = vec + t * step
            ll_c, _, _ = evaluate(cand, 0)
            if np.isfinite(ll_c) and ll_c >= ll - slack:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                "step-halving failed to increase the log-likelihood",
                last=ThetaParams.from_vector(vec, J, link), iterations=it,
                gradient_norm=float(np.max(np.abs(grad))),
            )
        moved = np.max(np.abs(cand - vec))
        vec = cand
        ll, grad, hess = evaluate(vec, 2)
        history.append(ll)
        if moved < param_tol or np.max(np.abs(grad)) < tol:
            converged = True
            break

    theta = ThetaParams.from_vector(vec, J, link)
    gnorm = float(np.max(np.abs(grad)))
    if not converged:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (max|score|={gnorm:.3g})",
                               last=theta, iterations=it, gradient_norm=gnorm)
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("observed information is singular",
                                  direction=_null_direction(-hess)) from None
    cov = 0.5 * (cov + cov.T)
    return FitResult(theta, cov, converged, it, gnorm, ll, weights=w, warnings=warnings,
                     info={"loglik_path": history})


def _null_direction(info: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (info + info.T))
    return vecs[:, 0]
