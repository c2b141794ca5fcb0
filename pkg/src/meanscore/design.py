"""Phase-two sample allocation.

Allocations map phase-one strata to validation counts.  Besides simple
random and balanced sampling this module implements the Neyman-type
optimal allocation for a target parameter, the pilot-then-adaptive
two-wave design, and a pilot that deliberately under-samples
uninformative strata.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DataError, SingularMatrixError
from .mean_score import mean_score_fit, within_stratum_covariances
from .model import Cohort, LinkKind, ThetaParams, score_matrix, weighted_derivatives
from .strata import StratumKey, StratumTable, stratum_ids

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Allocation:
    counts: dict
    total: int

    def __post_init__(self):
        counts = {StratumKey(*k): int(v) for k, v in self.counts.items()}
        if any(v < 0 for v in counts.values()):
            raise DataError("allocation has negative counts")
        if sum(counts.values()) != self.total:
            raise DataError(f"allocation counts sum to {sum(counts.values())}, expected {self.total}")
        object.__setattr__(self, "counts", dict(sorted(counts.items())))

    def __getitem__(self, key):
        return self.counts.get(StratumKey(*key), 0)

    def keys(self):
        return list(self.counts)

    def vector(self, keys) -> np.ndarray:
        return np.array([self[k] for k in keys], dtype=np.int64)

    def check_capacity(self, strata) -> None:
        N = _phase_one(strata)
        over = [k for k, v in self.counts.items() if v > N.get(k, 0)]
        if over:
            raise DataError(f"allocation exceeds stratum size in {', '.join(map(str, over[:5]))}")


@dataclass
class NuisanceEstimates:
    """Information matrix and per-stratum score covariances driving the optimal design."""

    info_matrix: np.ndarray
    stratum_cov: dict
    source: str
    theta: Optional[ThetaParams] = None
    pooled_cov: Optional[np.ndarray] = None
    fallback_strata: list = field(default_factory=list)

    def cov_for(self, key) -> np.ndarray:
        key = StratumKey(*key)
        if key in self.stratum_cov:
            return self.stratum_cov[key]
        if self.pooled_cov is None:
            raise DataError(f"no score covariance for stratum {key}")
        return self.pooled_cov


def _phase_one(strata) -> dict:
    if isinstance(strata, StratumTable):
        return {k: int(v) for k, v in zip(strata.keys, strata.N)}
    if isinstance(strata, Cohort):
        keys, ids = stratum_ids(strata)
        return {k: int(c) for k, c in zip(keys, np.bincount(ids, minlength=len(keys)))}
    return {StratumKey(*k): int(v) for k, v in dict(strata).items()}


def _ordered(strata):
    N = _phase_one(strata)
    keys = sorted(N)
    return keys, np.array([N[k] for k in keys], dtype=np.int64)


def _check_total(n, N):
    if n < 0:
        raise DataError("sample size must be non-negative")
    if n > N.sum():
        raise DataError(f"requested {n} subjects but the cohort has {int(N.sum())}")


def _waterfill(start, cap, extra, rng=None):
    """Add ``extra`` units as evenly as possible to strata below ``cap``.

    Each pass hands every unsaturated stratum the same share; the final
    remainder goes to the first strata in key order, or to randomly chosen
    ones when ``rng`` is given.
    """
    counts = np.array(start, dtype=np.int64)
    cap = np.asarray(cap, dtype=np.int64)
    extra = int(extra)
    while extra > 0:
        open_ = np.flatnonzero(counts < cap)
        if open_.size == 0:
            raise DataError("not enough subjects to fill the allocation")
        share = extra // open_.size
        if share == 0:
            pick = open_[:extra] if rng is None else np.sort(rng.choice(open_, extra, replace=False))
            counts[pick] += 1
            break
        add = np.minimum(share, cap[open_] - counts[open_])
        counts[open_] += add
        extra -= int(add.sum())
    return counts


def _round_to_total(x, total, upper):
    """Largest-remainder rounding of ``x`` to integers summing to ``total``, capped by ``upper``."""
    x = np.asarray(x, dtype=float)
    upper = np.asarray(upper, dtype=np.int64)
    base = np.minimum(np.floor(x + 1e-9).astype(np.int64), upper)
    base = np.maximum(base, 0)
    short = int(total - base.sum())
    frac = x - base
    order = np.argsort(-frac, kind="stable")
    while short > 0:
        moved = False
        for s in order:
            if short == 0:
                break
            if base[s] < upper[s]:
                base[s] += 1
                short -= 1
                moved = True
        if not moved:
            raise DataError("allocation cannot be filled within stratum sizes")
    while short < 0:
        for s in order[::-1]:
            if short == 0:
                break
            if base[s] > 0:
                base[s] -= 1
                short += 1
    return base


def _solve_level(weights, lo, hi, total):
    """Continuous ``x = clip(c * weights, lo, hi)`` with ``sum(x) == total``."""
    weights = np.asarray(weights, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if total <= lo.sum():
        return lo.copy()
    if total >= hi.sum():
        return hi.copy()

    def fill(c):
        return np.clip(c * weights, lo, hi).sum()

    a, b = 0.0, 1.0
    while fill(b) < total:
        b *= 2.0
    for _ in range(200):
        m = 0.5 * (a + b)
        if fill(m) < total:
            a = m
        else:
            b = m
    c = 0.5 * (a + b)
    x = np.clip(c * weights, lo, hi)
    free = (c * weights > lo) & (c * weights < hi) & (weights > 0)
    if free.any():
        rest = total - x[~free].sum()
        x[free] = weights[free] * rest / weights[free].sum()
    return x


# ---------------------------------------------------------------------------
# allocations


def srs_allocation(strata, n: int, rng: np.random.Generator) -> Allocation:
    """Stratum tallies of a simple random sample of ``n`` subjects."""
    keys, N = _ordered(strata)
    _check_total(n, N)
    counts = rng.multivariate_hypergeometric(N, n) if n else np.zeros_like(N)
    return Allocation(dict(zip(keys, counts.tolist())), n)


def balanced_allocation(strata, n: int, rng: Optional[np.random.Generator] = None) -> Allocation:
    """Equal counts per stratum; capacity left by small strata is re-spread over the rest."""
    keys, N = _ordered(strata)
    _check_total(n, N)
    counts = _waterfill(np.zeros_like(N), N, n, rng)
    return Allocation(dict(zip(keys, counts.tolist())), n)


def target_variances(nuisance: NuisanceEstimates, keys, target_index: int) -> np.ndarray:
    """``[I^-1 Var(U | s) I^-1]_kk`` for each stratum."""
    try:
        inv = np.linalg.inv(nuisance.info_matrix)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(nuisance.info_matrix)
        raise SingularMatrixError("nuisance information matrix is singular", direction=vecs[:, 0]) from None
    P = inv.shape[0]
    if not 0 <= target_index < P:
        raise DataError(f"target index {target_index} outside 0..{P - 1}")
    row = inv[target_index]
    return np.array([max(float(row @ nuisance.cov_for(k) @ row), 0.0) for k in keys])


def optimal_allocation(strata, nuisance: NuisanceEstimates, target_index: int, n: int,
                       min_count: int = 1) -> Allocation:
    """Neyman-type allocation minimising the variance of one parameter.

    Stratum ``s`` receives a count proportional to
    ``N(s) * sqrt([I^-1 Var(U|s) I^-1]_kk)`` where ``k = target_index``
    (0-based position in ``(alpha, beta)``), bounded above by ``N(s)``.
    Strata with positive weight receive at least ``min_count`` when the
    budget allows, so every such stratum keeps a positive sampling
    probability.  The continuous solution is rounded by largest remainder.
    """
    keys, N = _ordered(strata)
    _check_total(n, N)
    v = target_variances(nuisance, keys, target_index)
    w = N * np.sqrt(v)
    if not np.any(w > 0):
        logger.warning("all optimal weights are zero; falling back to proportional allocation")
        w = N.astype(float)
    lo = np.where(w > 0, np.minimum(min_count, N), 0)
    if lo.sum() > n:
        lo = np.zeros_like(lo)
    x = _solve_level(w, lo, N, n)
    counts = _round_to_total(x, n, N)
    return Allocation(dict(zip(keys, counts.tolist())), n)


def adaptive_allocation(optimal: Allocation, pilot: Allocation, strata) -> Allocation:
    """Second-wave counts that move the pilot toward the optimal allocation.

    Each stratum receives ``max(0, k * n_opt(s) - n_pilot(s))`` capped at its
    unvalidated remainder ``N(s) - n_pilot(s)``.  The scalar ``k`` (1 when no
    bound binds) is set so the wave totals ``n - sum(n_pilot)``: budget
    freed by saturated or over-sampled strata is spread over the others in
    proportion to ``n_opt``.
    """
    N_map = _phase_one(strata)
    keys = sorted(set(N_map) | set(optimal.counts) | set(pilot.counts))
    N = np.array([N_map.get(k, 0) for k in keys], dtype=np.int64)
    opt = optimal.vector(keys).astype(float)
    pil = pilot.vector(keys)
    if np.any(pil > N):
        raise DataError("pilot allocation exceeds stratum sizes")
    remaining = optimal.total - int(pil.sum())
    if remaining < 0:
        raise DataError(f"pilot size {int(pil.sum())} exceeds the total budget {optimal.total}")
    cap = N - pil
    if remaining > cap.sum():
        raise DataError("not enough unvalidated subjects for the adaptive wave")
    if remaining == 0:
        return Allocation({k: 0 for k in keys}, 0)

    def fill(c):
        return np.clip(c * opt - pil, 0, cap).sum()

    if not np.any(opt > 0):
        x = _waterfill(np.zeros_like(cap), cap, remaining).astype(float)
    elif fill(1e12) < remaining:
        # every stratum with positive optimal weight is exhausted
        base = np.clip(1e12 * opt - pil, 0, cap)
        x = base + _waterfill(np.zeros_like(cap), cap - base.astype(np.int64),
                              remaining - int(base.sum()))
    else:
        a, b = 0.0, 1.0
        while fill(b) < remaining:
            b *= 2.0
        for _ in range(200):
            m = 0.5 * (a + b)
            if fill(m) < remaining:
                a = m
            else:
                b = m
        c = b
        x = np.clip(c * opt - pil, 0, cap)
        free = (c * opt - pil > 0) & (c * opt - pil < cap)
        if free.any():
            rest = remaining - x[~free].sum()
            x[free] = np.maximum(opt[free] * (rest + pil[free].sum()) / opt[free].sum() - pil[free], 0)
    counts = _round_to_total(x, remaining, cap)
    return Allocation(dict(zip(keys, counts.tolist())), remaining)


def intermittently_censored(n_times: int) -> Callable:
    """Predicate for strata censored before the last time index."""
    return lambda key: (not key.event) and key.time_index < n_times


def undersampled_pilot(strata, n_pilot: int, undersample: Optional[Callable] = None,
                       cap_per_stratum: int = 4, rng: Optional[np.random.Generator] = None) -> Allocation:
    """Balanced pilot that gives matched strata at most ``cap_per_stratum`` subjects.

    The default predicate matches censored strata before the last observed
    time index.  The rest of the pilot budget is balanced over the other
    strata; if they cannot absorb it the leftover spreads over every stratum
    with capacity.
    """
    keys, N = _ordered(strata)
    _check_total(n_pilot, N)
    if undersample is None:
        undersample = intermittently_censored(max(k.time_index for k in keys))
    matched = np.array([bool(undersample(k)) for k in keys])
    counts = np.zeros_like(N)
    counts[matched] = np.minimum(cap_per_stratum, N[matched])
    if counts.sum() > n_pilot:
        # budget too small even for the capped strata: balance within the cap
        counts = _waterfill(np.zeros_like(N), np.where(matched, counts, 0), n_pilot, rng)
        return Allocation(dict(zip(keys, counts.tolist())), n_pilot)
    rest = n_pilot - int(counts.sum())
    if (~matched).any():
        cap_other = np.where(matched, 0, N)
        room = int(cap_other.sum())
        counts = _waterfill(counts, np.where(matched, counts, N), min(rest, room), rng)
        rest -= min(rest, room)
    if rest > 0:
        counts = _waterfill(counts, N, rest, rng)
    return Allocation(dict(zip(keys, counts.tolist())), n_pilot)


# ---------------------------------------------------------------------------
# nuisance quantities


def _stratum_covariances(theta, sub: Cohort, keys, ids):
    U = score_matrix(theta, sub)
    cov, counts = within_stratum_covariances(U, ids, len(keys), ddof=1)
    pooled = np.cov(U, rowvar=False, ddof=1) if U.shape[0] > 1 else np.zeros((U.shape[1],) * 2)
    out, fallback = {}, []
    for s, key in enumerate(keys):
        if counts[s] >= 2:
            out[key] = cov[s]
        else:
            out[key] = pooled
            fallback.append(key)
    return out, pooled, fallback


def pilot_nuisance(cohort: Cohort, pilot_validated, link=LinkKind.CLOGLOG, **solver) -> NuisanceEstimates:
    """Estimate the design inputs from an internal pilot sample.

    The information matrix weights each pilot subject by
    ``N(s)/n_pilot(s)``; stratum score covariances use the unbiased
    ``n/(n-1)`` form.  Strata with fewer than two pilot subjects (or none)
    fall back to the pooled pilot covariance and are listed in
    ``fallback_strata``.
    """
    fit = mean_score_fit(cohort, pilot_validated, link, **solver)
    table: StratumTable = fit.info["strata"]
    sub = cohort.subset(table.validated)
    cov, pooled, fallback = _stratum_covariances(fit.theta, sub, table.keys, table.ids[table.validated])
    return NuisanceEstimates(fit.info["information"], cov, "pilot", fit.theta, pooled, fallback)


def oracle_nuisance(external: Cohort, link, theta: ThetaParams) -> NuisanceEstimates:
    """Design inputs from a fully observed external sample, evaluated at ``theta``."""
    link = LinkKind.parse(link)
    if theta.link is not link:
        theta = ThetaParams(theta.alpha, theta.beta, link)
    _, _, hess = weighted_derivatives(theta, external)
    info = -hess / external.size
    keys, ids = stratum_ids(external)
    cov, pooled, fallback = _stratum_covariances(theta, external, keys, ids)
    return NuisanceEstimates(0.5 * (info + info.T), cov, "oracle", theta, pooled, fallback)


# ---------------------------------------------------------------------------
# drawing subjects


def sample_allocation(cohort: Cohort, allocation: Allocation, rng: np.random.Generator,
                      exclude=None) -> np.ndarray:
    """Draw subjects uniformly without replacement within each stratum."""
    keys, ids = stratum_ids(cohort)
    pos = {k: s for s, k in enumerate(keys)}
    available = np.ones(cohort.size, dtype=bool)
    if exclude is not None:
        available[np.asarray(exclude, dtype=np.int64)] = False
    chosen = []
    for key, count in allocation.counts.items():
        if count == 0:
            continue
        if key not in pos:
            raise DataError(f"stratum {key} does not occur in the cohort")
        pool = np.flatnonzero((ids == pos[key]) & available)
        if pool.size < count:
            raise DataError(f"stratum {key} has {pool.size} available subjects, {count} requested")
        chosen.append(rng.choice(pool, count, replace=False))
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))
