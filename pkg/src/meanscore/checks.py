"""Self-checks against independent reference computations.

Each check compares the package against a slow but obviously correct
oracle: central finite differences for the derivatives, logistic IRLS on
the person-period expansion for the logit fit, and exhaustive integer
search for the optimal allocation.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .design import NuisanceEstimates, optimal_allocation
from .model import Cohort, LinkKind, SubjectRecord, ThetaParams, fit_weighted, hessian, loglik, score
from .strata import StratumKey


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


# ---------------------------------------------------------------------------
# finite differences


def random_theta(rng, J, d, link) -> ThetaParams:
    return ThetaParams(rng.uniform(-3.0, 0.5, J), rng.normal(0.0, 0.5, d), LinkKind.parse(link))


def random_record(rng, J, d) -> SubjectRecord:
    return SubjectRecord(int(rng.integers(1, J + 1)), bool(rng.random() < 0.5), (0,), rng.normal(0, 1, d))


def fd_score(theta: ThetaParams, rec: SubjectRecord, h: float = 1e-6) -> np.ndarray:
    v = theta.vector
    out = np.empty_like(v)
    for k in range(v.size):
        up, dn = v.copy(), v.copy()
        up[k] += h
        dn[k] -= h
        f_up = loglik(ThetaParams.from_vector(up, theta.n_times, theta.link), rec)
        f_dn = loglik(ThetaParams.from_vector(dn, theta.n_times, theta.link), rec)
        out[k] = (f_up - f_dn) / (2 * h)
    return out


def fd_hessian(theta: ThetaParams, rec: SubjectRecord, h: float = 1e-6) -> np.ndarray:
    v = theta.vector
    out = np.empty((v.size, v.size))
    for k in range(v.size):
        up, dn = v.copy(), v.copy()
        up[k] += h
        dn[k] -= h
        s_up = score(ThetaParams.from_vector(up, theta.n_times, theta.link), rec)
        s_dn = score(ThetaParams.from_vector(dn, theta.n_times, theta.link), rec)
        out[:, k] = (s_up - s_dn) / (2 * h)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


def check_derivatives(n_draws: int = 100, seed: int = 0, score_tol: float = 1e-6,
                      hess_tol: float = 1e-5) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_s = worst_h = 0.0
    for link in LinkKind:
        for _ in range(n_draws):
            J, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            theta, rec = random_theta(rng, J, d, link), random_record(rng, J, d)
            worst_s = max(worst_s, relative_error(score(theta, rec), fd_score(theta, rec)))
            worst_h = max(worst_h, relative_error(hessian(theta, rec), fd_hessian(theta, rec)))
    ok = worst_s < score_tol and worst_h < hess_tol
    return CheckResult("derivatives", ok, f"max rel. error score {worst_s:.2e}, hessian {worst_h:.2e}",
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# person-period logistic regression


def person_period_design(cohort: Cohort):
    """Expanded design matrix (time dummies then covariates) and binary outcomes."""
    rows, ys = [], []
    J = cohort.n_times
    for i in range(cohort.size):
        last = int(cohort.time_index[i])
        for j in range(1, last + 1):
            dummy = np.zeros(J)
            dummy[j - 1] = 1.0
            rows.append(np.concatenate([dummy, cohort.covariates[i]]))
            ys.append(1.0 if (j == last and cohort.event[i]) else 0.0)
    return np.asarray(rows), np.asarray(ys)


def irls_logistic(Z, y, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Plain iteratively reweighted least squares for logistic regression."""
    b = np.zeros(Z.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(Z @ b)))
        W = p * (1 - p)
        zwork = Z @ b + (y - p) / W
        b_new = np.linalg.solve(Z.T @ (W[:, None] * Z), Z.T @ (W * zwork))
        if np.max(np.abs(b_new - b)) < tol:
            return b_new
        b = b_new
    return b


def random_cohort(rng, N, J, d, link=LinkKind.LOGIT) -> Cohort:
    X = rng.normal(0, 1, (N, d))
    theta = ThetaParams(rng.uniform(-2.0, -0.5, J), rng.normal(0, 0.5, d), link)
    eta = theta.alpha[None, :] + (X @ theta.beta)[:, None]
    lam = theta.link.inverse(eta)
    hit = rng.random(lam.shape) < lam
    ev = hit.any(axis=1)
    y = np.where(ev, np.argmax(hit, axis=1) + 1, rng.integers(1, J + 1, N))
    # ensure every period has at least one event so each alpha is estimable
    for j in range(1, J + 1):
        if not np.any(ev & (y == j)):
            y[j - 1], ev[j - 1] = j, True
    return Cohort(y, ev, np.zeros((N, 1), dtype=np.int64), X, J)


def check_person_period(n_datasets: int = 20, seed: int = 1, tol: float = 1e-6) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_datasets):
        N, J, d = int(rng.integers(100, 501)), int(rng.integers(1, 7)), int(rng.integers(1, 5))
        cohort = random_cohort(rng, N, J, d)
        fit = fit_weighted(cohort, None, LinkKind.LOGIT)
        Z, y = person_period_design(cohort)
        worst = max(worst, float(np.max(np.abs(fit.theta.vector - irls_logistic(Z, y)))))
    return CheckResult("person-period", worst < tol, f"max |difference| {worst:.2e}", time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# allocation


def allocation_objective(counts, N, v) -> float:
    """``sum_s (N_s/N) (N_s/n_s - 1) v_s``: the design-dependent part of the target variance."""
    counts, N, v = (np.asarray(a, float) for a in (counts, N, v))
    total = N.sum()
    out = 0.0
    for c, Ns, vs in zip(counts, N, v):
        if vs == 0:
            continue
        if c == 0:
            return np.inf
        out += (Ns / total) * (Ns / c - 1.0) * vs
    return out


def brute_force_allocation(N, v, n):
    best, best_obj = None, np.inf
    ranges = [range(0, int(Ns) + 1) for Ns in N[:-1]]
    for head in itertools.product(*ranges):
        last = n - sum(head)
        if last < 0 or last > N[-1]:
            continue
        cand = (*head, last)
        obj = allocation_objective(cand, N, v)
        if obj < best_obj - 1e-15:
            best, best_obj = cand, obj
    return np.asarray(best), best_obj


def swap_neighbours(counts, N):
    counts = np.asarray(counts)
    for a in range(counts.size):
        for b in range(counts.size):
            if a != b and counts[a] > 0 and counts[b] < N[b]:
                nb = counts.copy()
                nb[a] -= 1
                nb[b] += 1
                yield nb


def random_allocation_instance(rng):
    P = 2
    A = rng.normal(0, 1, (P, P))
    info = A @ A.T + P * np.eye(P)
    covs = []
    for _ in range(3):
        B = rng.normal(0, 1, (P, P))
        covs.append(B @ B.T + 0.05 * np.eye(P))
    N = rng.integers(2, 25, 3)
    n = int(rng.integers(3, min(30, N.sum()) + 1))
    keys = [StratumKey(j + 1, True, (0,)) for j in range(3)]
    nuis = NuisanceEstimates(info, dict(zip(keys, covs)), "oracle")
    return keys, N, n, nuis


def check_allocation(n_instances: int = 50, seed: int = 2) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_instances):
        keys, N, n, nuis = random_allocation_instance(rng)
        k = int(rng.integers(0, 2))
        inv = np.linalg.inv(nuis.info_matrix)
        v = np.array([inv[k] @ nuis.stratum_cov[key] @ inv[k] for key in keys])
        alloc = optimal_allocation(dict(zip(keys, N.tolist())), nuis, k, n)
        ours = alloc.vector(keys)
        _, best = brute_force_allocation(N, v, n)
        obj = allocation_objective(ours, N, v)
        ok = obj <= best * (1 + 1e-12) + 1e-15 or any(
            allocation_objective(nb, N, v) <= best * (1 + 1e-12) + 1e-15 for nb in swap_neighbours(ours, N))
        failures += not ok
    return CheckResult("allocation", failures == 0,
                       f"{n_instances - failures}/{n_instances} instances within one unit swap of the optimum",
                       time.perf_counter() - t0)


def run_all() -> list:
    return [check_derivatives(), check_person_period(), check_allocation()]
