"""Numpy implementation of the inner accumulation kernels.

This is the reference path and the fallback when the compiled
``_ckernels`` extension is unavailable.  Both modules expose the same
functions with the same argument conventions:

* ``y`` holds 1-based discrete time indices (int64), ``event`` is uint8.
* ``link`` is 0 for logit and 1 for complementary log-log.
* Parameter vectors are laid out as ``(alpha_1..alpha_J, beta_1..beta_d)``.
"""
import numpy as np

LOGIT = 0
CLOGLOG = 1


def _expand(y):
    """Person-period rows: subject index and 0-based period for every at-risk interval."""
    y = np.asarray(y, dtype=np.int64)
    total = int(y.sum())
    rows = np.repeat(np.arange(y.shape[0]), y)
    offsets = np.repeat(np.cumsum(y) - y, y)
    periods = np.arange(total) - offsets
    return rows, periods


def period_terms(eta, d, link):
    """Log-likelihood, first and second derivative in eta for each period."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if link == LOGIT:
            p = 0.5 * (1.0 + np.tanh(0.5 * eta))
            ll = d * eta - np.logaddexp(0.0, eta)
            d1 = d - p
            d2 = -p * (1.0 - p)
        else:
            mu = np.exp(eta)
            ll = np.where(d > 0, np.log(-np.expm1(-mu)), -mu)
            r = mu / np.expm1(mu)
            # mu * e^mu / (e^mu - 1), written to avoid inf * 0
            s = mu / -np.expm1(-mu)
            d1 = np.where(d > 0, r, -mu)
            d2 = np.where(d > 0, r * (1.0 - s), -mu)
    return ll, d1, d2


def accumulate(y, event, X, w, alpha, beta, link, order):
    """Weighted log-likelihood and (optionally) gradient and Hessian.

    ``order`` is 0 (value only), 1 (value and gradient) or 2 (all three).
    Returns ``(loglik, grad, hess)`` with ``None`` for what was not requested.
    """
    J = alpha.shape[0]
    d = beta.shape[0]
    rows, periods = _expand(y)
    xb = X @ beta
    eta = alpha[periods] + xb[rows]
    dflag = (event[rows] > 0) & (periods == y[rows] - 1)
    ll, d1, d2 = period_terms(eta, dflag.astype(np.float64), link)
    wr = w[rows]
    loglik = float(np.dot(wr, ll))
    if order < 1:
        return loglik, None, None

    grad = np.empty(J + d)
    grad[:J] = np.bincount(periods, weights=wr * d1, minlength=J)
    s1 = np.bincount(rows, weights=d1, minlength=y.shape[0])
    grad[J:] = X.T @ (w * s1)
    if order < 2:
        return loglik, grad, None

    hess = np.zeros((J + d, J + d))
    wd2 = wr * d2
    hess[np.arange(J), np.arange(J)] = np.bincount(periods, weights=wd2, minlength=J)
    Xr = X[rows]
    for k in range(d):
        col = np.bincount(periods, weights=wd2 * Xr[:, k], minlength=J)
        hess[:J, J + k] = col
        hess[J + k, :J] = col
    s2 = np.bincount(rows, weights=d2, minlength=y.shape[0])
    hess[J:, J:] = X.T @ (X * (w * s2)[:, None])
    return loglik, grad, hess


def subject_scores(y, event, X, alpha, beta, link):
    """Unweighted per-subject score vectors, shape ``(n, J + d)``."""
    n = y.shape[0]
    J = alpha.shape[0]
    rows, periods = _expand(y)
    eta = alpha[periods] + (X @ beta)[rows]
    dflag = (event[rows] > 0) & (periods == y[rows] - 1)
    _, d1, _ = period_terms(eta, dflag.astype(np.float64), link)
    out = np.zeros((n, J + X.shape[1]))
    out[rows, periods] = d1
    s1 = np.bincount(rows, weights=d1, minlength=n)
    out[:, J:] = s1[:, None] * X
    return out


def subject_loglik(y, event, X, alpha, beta, link):
    """Per-subject log-likelihood contributions."""
    rows, periods = _expand(y)
    eta = alpha[periods] + (X @ beta)[rows]
    dflag = (event[rows] > 0) & (periods == y[rows] - 1)
    ll, _, _ = period_terms(eta, dflag.astype(np.float64), link)
    return np.bincount(rows, weights=ll, minlength=y.shape[0])


def cox_accumulate(time, event, X, w, beta):
    """Weighted Breslow partial log-likelihood, gradient and Hessian.

    The risk set at an event time ``t`` is every subject with ``time >= t``;
    tied event times share one denominator.
    """
    n, d = X.shape
    order = np.argsort(-time, kind="stable")
    t = time[order]
    ev = event[order] > 0
    Xs = X[order]
    ws = w[order]
    eta = Xs @ beta
    shift = eta.max() if n else 0.0
    r = ws * np.exp(eta - shift)
    S0 = np.cumsum(r)
    S1 = np.cumsum(r[:, None] * Xs, axis=0)
    S2 = np.cumsum(r[:, None, None] * Xs[:, :, None] * Xs[:, None, :], axis=0)
    # the risk set for a tie group ends at the group's last position
    neg = -t
    last = np.searchsorted(neg, neg, side="right") - 1
    S0, S1, S2 = S0[last], S1[last], S2[last]

    we = ws[ev]
    s0 = S0[ev]
    xbar = S1[ev] / s0[:, None]
    loglik = float(np.dot(we, eta[ev] - shift - np.log(s0)))
    grad = (we[:, None] * (Xs[ev] - xbar)).sum(axis=0)
    second = S2[ev] / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :]
    hess = -(we[:, None, None] * second).sum(axis=0)
    return loglik, grad, hess
