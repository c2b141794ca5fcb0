"""Slow, independent reference implementations used by the tests."""
import itertools
import math

import numpy as np


def expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def hazard_ref(alpha_j, beta, x, link):
    eta = alpha_j + float(np.dot(beta, x))
    if link == "logit":
        return expit(eta)
    return 1.0 - math.exp(-math.exp(eta))


def person_period_loglik(alpha, beta, x, time_index, event, link):
    """Sum of Bernoulli log-likelihoods over the at-risk periods."""
    total = 0.0
    for j in range(1, time_index + 1):
        lam = hazard_ref(alpha[j - 1], beta, x, link)
        d = 1 if (j == time_index and event) else 0
        total += d * math.log(lam) + (1 - d) * math.log(1.0 - lam)
    return total


def tally_strata(time_index, event, surrogate, validated):
    """Naive double loop over subjects and validated subjects."""
    N, n = {}, {}
    for i in range(len(time_index)):
        key = (int(time_index[i]), bool(event[i]), tuple(int(v) for v in surrogate[i]))
        N[key] = N.get(key, 0) + 1
        n.setdefault(key, 0)
    for i in validated:
        key = (int(time_index[i]), bool(event[i]), tuple(int(v) for v in surrogate[i]))
        n[key] += 1
    return N, n


def cox_partial_loglik_ref(beta, time, event, X, w=None):
    """Breslow partial likelihood by explicit risk-set enumeration."""
    n = len(time)
    w = np.ones(n) if w is None else w
    total = 0.0
    for i in range(n):
        if not event[i]:
            continue
        denom = sum(w[j] * math.exp(float(X[j] @ beta)) for j in range(n) if time[j] >= time[i])
        total += w[i] * (float(X[i] @ beta) - math.log(denom))
    return total


def allocation_objective(counts, N, v):
    total = float(sum(N))
    out = 0.0
    for c, Ns, vs in zip(counts, N, v):
        if vs == 0:
            continue
        if c == 0:
            return math.inf
        out += (Ns / total) * (Ns / c - 1.0) * vs
    return out


def exhaustive_allocation(N, v, n):
    best, best_obj = None, math.inf
    for combo in itertools.product(*[range(int(x) + 1) for x in N]):
        if sum(combo) != n:
            continue
        obj = allocation_objective(combo, N, v)
        if obj < best_obj - 1e-15:
            best, best_obj = combo, obj
    return best, best_obj


def waterfill(caps, n, start=None):
    """Greedy one-unit-at-a-time equalising fill (smallest count first, key order on ties)."""
    counts = list(start) if start is not None else [0] * len(caps)
    for _ in range(n):
        open_ = [s for s in range(len(caps)) if counts[s] < caps[s]]
        s = min(open_, key=lambda k: (counts[k], k))
        counts[s] += 1
    return counts


def logistic_irls(Z, y, iters=100):
    b = np.zeros(Z.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-(Z @ b)))
        W = p * (1 - p)
        b = b + np.linalg.solve(Z.T @ (W[:, None] * Z), Z.T @ (y - p))
    return b
