"""Monte Carlo comparison of complete-case and mean score designs.

Covariates are four correlated variables built from a Gaussian copula
(two beta-distributed, two binary); outcomes follow the cloglog
discrete-time model on six periods with administrative censoring after
the sixth; the surrogate is a quartile coding of a noisy copy of ``X1``.

Every replication draws from its own generator seeded by
``(master_seed, replication)``, so results do not depend on the order or
degree of parallel execution.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from . import design
from .errors import DataError, MeanScoreError
from .mean_score import mean_score_fit
from .model import Cohort, LinkKind, ThetaParams, fit_weighted
from .strata import build_strata, phase_one_counts

logger = logging.getLogger(__name__)

TRUE_BETA = (math.log(1.5), math.log(0.7), math.log(1.3), -math.log(1.3))
TABULATED_ALPHA = {0.5: (-3.410, -3.027, -2.641, -2.249, -1.849, -1.435)}
SURROGATE_CUTS = (0.25, 0.5, 0.75)
ESTIMATORS = ("Full-CC", "CC-SRS", "MS-SRS", "MS-BAL", "MS-A", "MS-O")


# ---------------------------------------------------------------------------
# data-generating process


def gen_covariates(rng: np.random.Generator, N: int, rho: float = 0.3) -> np.ndarray:
    """``N x 4`` matrix: Beta(2, 1.5), Beta(3, 3) and two Bernoulli columns.

    All four share a Gaussian copula with ``Corr(W_j, W_k) = rho^|j-k|``.
    """
    if N < 1:
        raise DataError("N must be positive")
    idx = np.arange(4)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    W = rng.multivariate_normal(np.zeros(4), cov, size=N, method="cholesky")
    U = stats.norm.cdf(W)
    X = np.empty((N, 4))
    X[:, 0] = stats.beta.ppf(U[:, 0], 2.0, 1.5)
    X[:, 1] = stats.beta.ppf(U[:, 1], 3.0, 3.0)
    X[:, 2] = rng.random(N) < U[:, 2]
    X[:, 3] = rng.random(N) < U[:, 3]
    return X


def hazard_matrix(theta: ThetaParams, X) -> np.ndarray:
    """``(N, J)`` matrix of discrete hazards ``lambda_j(x_i)``."""
    eta = np.asarray(theta.alpha)[None, :] + (np.asarray(X, dtype=float) @ np.asarray(theta.beta))[:, None]
    return theta.link.inverse(eta)


def gen_outcomes(rng: np.random.Generator, X, theta: ThetaParams):
    """Discrete event times censored after the last period of ``theta``.

    Returns ``(time_index, event)``.  Subjects surviving all ``J`` periods
    are reported at index ``J`` with ``event = False``.
    """
    lam = hazard_matrix(theta, X)
    hit = rng.random(lam.shape) < lam
    event = hit.any(axis=1)
    first = np.argmax(hit, axis=1) + 1
    time_index = np.where(event, first, lam.shape[1])
    return time_index.astype(np.int64), event


def piecewise_exponential_times(rng: np.random.Generator, X, alpha, beta, boundaries):
    """Continuous event times whose grouped version follows the cloglog model.

    On interval ``j`` (between consecutive ``boundaries``, starting at 0) the
    hazard rate is ``exp(alpha_j + beta'x) / width_j``, so the probability of
    failing in interval ``j`` given survival to its start is
    ``1 - exp(-exp(alpha_j + beta'x))``.  Times past the last boundary are
    censored there.  Returns ``(time, event)``.
    """
    b = np.asarray(boundaries, dtype=float)
    edges = np.concatenate([[0.0], b])
    width = np.diff(edges)
    eta = np.asarray(alpha, float)[None, :] + (np.asarray(X, float) @ np.asarray(beta, float))[:, None]
    mass = np.exp(eta)
    cum = np.cumsum(mass, axis=1)
    E = rng.exponential(size=mass.shape[0])
    j = (cum < E[:, None]).sum(axis=1)
    event = j < b.size
    jj = np.minimum(j, b.size - 1)
    before = np.where(jj > 0, cum[np.arange(cum.shape[0]), jj - 1], 0.0)
    frac = (E - before) / mass[np.arange(mass.shape[0]), jj]
    time = np.where(event, edges[jj] + frac * width[jj], b[-1])
    return time, event


def quartile_code(values, cuts=SURROGATE_CUTS) -> np.ndarray:
    """Codes ``1..len(cuts)+1``; a value on a cut point goes to the lower bin."""
    return np.searchsorted(np.asarray(cuts), np.asarray(values, dtype=float), side="left") + 1


def gen_surrogate(rng: np.random.Generator, x1, sd: float = 0.1, cuts=SURROGATE_CUTS) -> np.ndarray:
    x1 = np.asarray(x1, dtype=float)
    noise = rng.normal(0.0, sd, size=x1.shape) if sd > 0 else 0.0
    return quartile_code(x1 + noise, cuts)


def marginal_survival(alpha, beta, X, link=LinkKind.CLOGLOG) -> float:
    """Average over ``X`` of the probability of surviving every period."""
    theta = ThetaParams(np.asarray(alpha, float), np.asarray(beta, float), LinkKind.parse(link))
    lam = hazard_matrix(theta, X)
    return float(np.mean(np.prod(1.0 - lam, axis=1)))


def calibrate_baseline(censoring_target: float, rng: Optional[np.random.Generator] = None,
                       beta=TRUE_BETA, reference=TABULATED_ALPHA[0.5], n_draws: int = 10**6,
                       tol: float = 0.005, use_tabulated: bool = True) -> tuple:
    """Baseline ``alpha`` giving marginal censoring ``censoring_target``.

    The 50% values are tabulated.  Other targets shift ``reference`` by a
    scalar found by bisection on the covariate-averaged survival, which is
    exact given the covariate draws, so the Monte Carlo error comes from
    the draws alone.
    """
    if not 0.0 < censoring_target < 1.0:
        raise DataError("censoring target must lie in (0, 1)")
    if use_tabulated and censoring_target in TABULATED_ALPHA:
        return TABULATED_ALPHA[censoring_target]
    rng = rng if rng is not None else np.random.default_rng(0)
    X = gen_covariates(rng, n_draws)
    ref = np.asarray(reference, dtype=float)

    def gap(c):
        return marginal_survival(ref + c, beta, X) - censoring_target

    lo, hi = -10.0, 10.0
    if gap(lo) * gap(hi) > 0:
        raise DataError("censoring target cannot be bracketed")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if gap(lo) * gap(mid) <= 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-10:
            break
    c = 0.5 * (lo + hi)
    if abs(gap(c)) > tol:
        raise DataError("bisection did not reach the censoring tolerance")
    return tuple(float(v) for v in ref + c)


# ---------------------------------------------------------------------------
# configuration and summaries


@dataclass(frozen=True)
class ScenarioConfig:
    N: int = 4000
    n: int = 400
    censoring_target: float = 0.5
    beta_true: tuple = TRUE_BETA
    alpha_true: Optional[tuple] = None
    pilot_fraction: float = 0.5
    target_index: Optional[int] = None
    replications: int = 1000
    master_seed: int = 20200917
    oracle_size: int = 10_000
    surrogate_sd: float = 0.1
    rho: float = 0.3
    link: str = "cloglog"
    estimators: tuple = ESTIMATORS
    undersample_cap: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.n <= self.N:
            raise DataError("need 0 < n <= N")
        if not 0.0 < self.pilot_fraction < 1.0:
            raise DataError("pilot_fraction must lie in (0, 1)")
        if self.alpha_true is not None and len(self.alpha_true) != 6:
            raise DataError("alpha_true must have 6 entries")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise DataError(f"unknown estimators: {sorted(unknown)}")
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def theta(self) -> ThetaParams:
        alpha = self.alpha_true
        if alpha is None:
            alpha = calibrate_baseline(self.censoring_target, beta=self.beta_true)
        return ThetaParams(np.asarray(alpha, float), np.asarray(self.beta_true, float),
                           LinkKind.parse(self.link))

    @property
    def target(self) -> int:
        return 6 if self.target_index is None else int(self.target_index)


def generate_cohort(config: ScenarioConfig, theta: ThetaParams, rng: np.random.Generator,
                    size: Optional[int] = None) -> Cohort:
    N = config.N if size is None else size
    X = gen_covariates(rng, N, config.rho)
    y, ev = gen_outcomes(rng, X, theta)
    z = gen_surrogate(rng, X[:, 0], config.surrogate_sd)
    return Cohort(y, ev, z.reshape(-1, 1), X, theta.n_times, ("x1", "x2", "x3", "x4"))


@dataclass
class MonteCarloSummary:
    """Per-replication estimates and their bias / variance / MSE decomposition.

    ``estimates[name]`` and ``std_errors[name]`` are ``(R, P)`` arrays with
    NaN rows for failed replications.  Summary statistics use the successful
    replications only; the variance is the ``1/R`` population form so that
    ``MSE = bias^2 + Var`` holds exactly.
    """

    estimators: tuple
    param_names: tuple
    truth: np.ndarray
    estimates: dict
    std_errors: dict
    failures: dict
    replications: int
    failure_reasons: dict = field(default_factory=dict)

    def _ok(self, name):
        est = self.estimates[name]
        return est[np.all(np.isfinite(est), axis=1)]

    def bias(self, name) -> np.ndarray:
        return self._ok(name).mean(axis=0) - self.truth

    def variance(self, name) -> np.ndarray:
        return self._ok(name).var(axis=0, ddof=0)

    def mse(self, name) -> np.ndarray:
        return self.bias(name) ** 2 + self.variance(name)

    def rmse(self, name) -> np.ndarray:
        return np.sqrt(self.mse(name))

    def mean_sandwich_variance(self, name) -> np.ndarray:
        se = self.std_errors[name]
        se = se[np.all(np.isfinite(se), axis=1)]
        return np.mean(se ** 2, axis=0)

    def unreliable(self, name) -> bool:
        return self.failures[name] > 0.05 * self.replications

    def rows(self) -> list:
        out = []
        for name in self.estimators:
            b, v = self.bias(name), self.variance(name)
            for k, p in enumerate(self.param_names):
                out.append({
                    "estimator": name, "parameter": p, "truth": float(self.truth[k]),
                    "bias": float(b[k]), "sd": float(np.sqrt(v[k])),
                    "rmse": float(np.sqrt(b[k] ** 2 + v[k])),
                    "successes": int(self.replications - self.failures[name]),
                    "failures": int(self.failures[name]),
                    "unreliable": bool(self.unreliable(name)),
                })
        return out

    def to_json(self) -> dict:
        return {
            "replications": self.replications,
            "parameters": list(self.param_names),
            "truth": self.truth.tolist(),
            "estimators": {
                name: {
                    "bias": self.bias(name).tolist(),
                    "sd": np.sqrt(self.variance(name)).tolist(),
                    "rmse": self.rmse(name).tolist(),
                    "mean_se": np.sqrt(self.mean_sandwich_variance(name)).tolist()
                    if np.any(np.isfinite(self.std_errors[name])) else None,
                    "failures": int(self.failures[name]),
                    "failure_reasons": self.failure_reasons.get(name, {}),
                    "unreliable": bool(self.unreliable(name)),
                }
                for name in self.estimators
            },
        }


# ---------------------------------------------------------------------------
# estimators on one phase-one cohort


def _draw_pilot(cohort, counts, n_pilot, rng, undersample_cap):
    if undersample_cap is None:
        alloc = design.balanced_allocation(counts, n_pilot)
    else:
        alloc = design.undersampled_pilot(counts, n_pilot, cap_per_stratum=undersample_cap)
    return alloc, design.sample_allocation(cohort, alloc, rng)


def run_estimators(cohort: Cohort, n: int, rng: np.random.Generator, *,
                   estimators: Sequence[str] = ESTIMATORS, link=LinkKind.CLOGLOG,
                   target_index: int = 0, pilot_fraction: float = 0.5,
                   oracle: Union[None, design.NuisanceEstimates, Callable] = None,
                   undersample_cap: Optional[int] = None, solver: Optional[dict] = None,
                   fitter: Optional[Callable] = None) -> dict:
    """Apply each estimator to one cohort; returns ``name -> (theta, se, error)``.

    ``oracle`` supplies the MS-O design inputs, either directly or as a
    zero-argument callable evaluated lazily.  ``fitter(cohort, validated,
    weights)`` replaces the discrete-time analysis of the selected sample
    (used for weighted Cox fits); it receives ``weights=None`` for the
    complete-case comparators.
    """
    link = LinkKind.parse(link)
    solver = solver or {}
    counts = phase_one_counts(cohort)
    out = {}

    def analyse(validated, weighted):
        if fitter is not None:
            if weighted:
                table = build_strata(cohort, validated)
                return fitter(cohort, table.validated, table.weights())
            return fitter(cohort, np.sort(validated), None)
        if weighted:
            return mean_score_fit(cohort, validated, link, **solver)
        return fit_weighted(cohort.subset(np.sort(validated)), None, link, **solver)

    def record(name, fn):
        try:
            fit = fn()
            theta = fit.theta.vector if isinstance(fit.theta, ThetaParams) else np.asarray(fit.theta)
            out[name] = (theta, fit.se, None)
        except (MeanScoreError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[name] = (None, None, type(exc).__name__)

    srs = None
    for name in estimators:
        if name == "Full-CC":
            record(name, lambda: analyse(np.arange(cohort.size), False))
        elif name in ("CC-SRS", "MS-SRS"):
            if srs is None:
                srs = np.sort(rng.choice(cohort.size, n, replace=False))
            record(name, lambda: analyse(srs, name == "MS-SRS"))
        elif name == "MS-BAL":
            record(name, lambda: analyse(
                design.sample_allocation(cohort, design.balanced_allocation(counts, n), rng), True))
        elif name == "MS-A":
            def adaptive():
                n_pilot = int(round(n * pilot_fraction))
                pilot_alloc, pilot = _draw_pilot(cohort, counts, n_pilot, rng, undersample_cap)
                nuis = design.pilot_nuisance(cohort, pilot, link, **solver)
                opt = design.optimal_allocation(counts, nuis, target_index, n)
                wave2 = design.adaptive_allocation(opt, pilot_alloc, counts)
                second = design.sample_allocation(cohort, wave2, rng, exclude=pilot)
                return analyse(np.concatenate([pilot, second]), True)
            record(name, adaptive)
        elif name == "MS-O":
            def optimal():
                nuis = oracle() if callable(oracle) else oracle
                if nuis is None:
                    raise DataError("MS-O needs oracle design inputs")
                opt = design.optimal_allocation(counts, nuis, target_index, n)
                return analyse(design.sample_allocation(cohort, opt, rng), True)
            record(name, optimal)
        else:
            raise DataError(f"unknown estimator {name!r}")
    return out


def replicate(config: ScenarioConfig, r: int, theta: Optional[ThetaParams] = None) -> dict:
    """One Monte Carlo replication of ``config``; seeded by ``(master_seed, r)``."""
    theta = theta if theta is not None else config.theta()
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, r]))
    cohort = generate_cohort(config, theta, rng)
    ext_rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, r, 1]))

    def oracle():
        external = generate_cohort(config, theta, ext_rng, size=config.oracle_size)
        return design.oracle_nuisance(external, theta.link, theta)

    return run_estimators(cohort, config.n, rng, estimators=config.estimators, link=theta.link,
                          target_index=config.target, pilot_fraction=config.pilot_fraction,
                          oracle=oracle, undersample_cap=config.undersample_cap)


def _replicate_star(args):
    return replicate(*args)


def summarize(results: Sequence[dict], estimators, truth, param_names) -> MonteCarloSummary:
    R, P = len(results), len(truth)
    estimates, ses, failures, reasons = {}, {}, {}, {}
    for name in estimators:
        est = np.full((R, P), np.nan)
        se = np.full((R, P), np.nan)
        tally = {}
        for r, res in enumerate(results):
            theta, s, err = res[name]
            if err is None:
                est[r], se[r] = theta, s
            else:
                tally[err] = tally.get(err, 0) + 1
        estimates[name], ses[name] = est, se
        failures[name] = int(sum(tally.values()))
        reasons[name] = tally
        if failures[name] > 0.05 * R:
            logger.warning("%s failed in %d of %d replications; summary unreliable", name, failures[name], R)
    return MonteCarloSummary(tuple(estimators), tuple(param_names), np.asarray(truth, float),
                             estimates, ses, failures, R, reasons)


def run_scenario(config: ScenarioConfig, n_jobs: int = 1) -> MonteCarloSummary:
    """Run all replications of ``config`` and summarise against the truth."""
    theta = config.theta()
    jobs = [(config, r, theta) for r in range(config.replications)]
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate_star, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        results = [_replicate_star(j) for j in jobs]
    names = theta.names(("x1", "x2", "x3", "x4"))
    return summarize(results, config.estimators, theta.vector, names)


def config_dict(config: ScenarioConfig) -> dict:
    d = asdict(config)
    d["beta_true"] = list(config.beta_true)
    d["alpha_true"] = None if config.alpha_true is None else list(config.alpha_true)
    d["estimators"] = list(config.estimators)
    return d


def summary_json(summary: MonteCarloSummary, config: Optional[ScenarioConfig] = None) -> str:
    payload = summary.to_json()
    if config is not None:
        payload["config"] = config_dict(config)
    return json.dumps(payload, indent=2, sort_keys=True)
