# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled accumulation kernels; see ``_pykernels`` for the contract."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, log, log1p, fabs, tanh

cnp.import_array()


cdef inline void _terms(double eta, bint ev, int link,
                        double* ll, double* d1, double* d2) noexcept nogil:
    cdef double p, mu, r, s
    if link == 0:
        p = 0.5 * (1.0 + tanh(0.5 * eta))
        if eta > 0:
            ll[0] = -eta - log1p(exp(-eta))
        else:
            ll[0] = -log1p(exp(eta))
        if ev:
            ll[0] += eta
            d1[0] = 1.0 - p
        else:
            d1[0] = -p
        d2[0] = -p * (1.0 - p)
    else:
        mu = exp(eta)
        if ev:
            ll[0] = log(-expm1(-mu))
            r = mu / expm1(mu)
            s = mu / (-expm1(-mu))
            d1[0] = r
            d2[0] = r * (1.0 - s)
        else:
            ll[0] = -mu
            d1[0] = -mu
            d2[0] = -mu


def accumulate(const long long[::1] y, const unsigned char[::1] event,
               const double[:, ::1] X, const double[::1] w,
               const double[::1] alpha, const double[::1] beta,
               int link, int order):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t J = alpha.shape[0]
    cdef Py_ssize_t P = J + d
    cdef Py_ssize_t i, j, k, l, yi
    cdef double xb, eta, ll, d1, d2, wi, s1, s2, total = 0.0
    cdef bint ev

    grad_arr = np.zeros(P)
    hess_arr = np.zeros((P, P))
    cdef double[::1] g = grad_arr
    cdef double[:, ::1] H = hess_arr

    with nogil:
        for i in range(n):
            wi = w[i]
            xb = 0.0
            for k in range(d):
                xb = xb + X[i, k] * beta[k]
            yi = y[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(yi):
                ev = event[i] != 0 and j == yi - 1
                eta = alpha[j] + xb
                _terms(eta, ev, link, &ll, &d1, &d2)
                total = total + wi * ll
                if order >= 1:
                    g[j] = g[j] + wi * d1
                    s1 = s1 + d1
                if order >= 2:
                    H[j, j] = H[j, j] + wi * d2
                    for k in range(d):
                        H[j, J + k] = H[j, J + k] + wi * d2 * X[i, k]
                    s2 = s2 + d2
            if order >= 1:
                for k in range(d):
                    g[J + k] = g[J + k] + wi * s1 * X[i, k]
            if order >= 2:
                for k in range(d):
                    for l in range(k + 1):
                        H[J + k, J + l] = H[J + k, J + l] + wi * s2 * X[i, k] * X[i, l]

        if order >= 2:
            for j in range(J):
                for k in range(d):
                    H[J + k, j] = H[j, J + k]
            for k in range(d):
                for l in range(k):
                    H[J + l, J + k] = H[J + k, J + l]

    if order < 1:
        return total, None, None
    if order < 2:
        return total, grad_arr, None
    return total, grad_arr, hess_arr


def subject_scores(const long long[::1] y, const unsigned char[::1] event,
                   const double[:, ::1] X, const double[::1] alpha,
                   const double[::1] beta, int link):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t J = alpha.shape[0]
    cdef Py_ssize_t i, j, k, yi
    cdef double xb, ll, d1, d2, s1
    out_arr = np.zeros((n, J + d))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            xb = 0.0
            for k in range(d):
                xb = xb + X[i, k] * beta[k]
            yi = y[i]
            s1 = 0.0
            for j in range(yi):
                _terms(alpha[j] + xb, event[i] != 0 and j == yi - 1, link, &ll, &d1, &d2)
                out[i, j] = d1
                s1 = s1 + d1
            for k in range(d):
                out[i, J + k] = s1 * X[i, k]
    return out_arr


def subject_loglik(const long long[::1] y, const unsigned char[::1] event,
                   const double[:, ::1] X, const double[::1] alpha,
                   const double[::1] beta, int link):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t i, j, k, yi
    cdef double xb, ll, d1, d2, acc
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            xb = 0.0
            for k in range(d):
                xb = xb + X[i, k] * beta[k]
            yi = y[i]
            acc = 0.0
            for j in range(yi):
                _terms(alpha[j] + xb, event[i] != 0 and j == yi - 1, link, &ll, &d1, &d2)
                acc = acc + ll
            out[i] = acc
    return out_arr


def cox_accumulate(const double[::1] time, const unsigned char[::1] event,
                   const double[:, ::1] X, const double[::1] w,
                   const double[::1] beta):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t a, b, i, k, l, start, stop
    cdef double shift, r, S0, t0, total = 0.0, wi

    order_arr = np.argsort(-np.asarray(time), kind="stable")
    cdef const long long[::1] order = order_arr.astype(np.int64)
    eta_arr = np.asarray(X) @ np.asarray(beta)
    cdef double[::1] eta = eta_arr
    shift = eta_arr.max() if n > 0 else 0.0

    grad_arr = np.zeros(d)
    hess_arr = np.zeros((d, d))
    S1_arr = np.zeros(d)
    S2_arr = np.zeros((d, d))
    cdef double[::1] g = grad_arr
    cdef double[:, ::1] H = hess_arr
    cdef double[::1] S1 = S1_arr
    cdef double[:, ::1] S2 = S2_arr
    cdef double xbar_k, xbar_l

    S0 = 0.0
    with nogil:
        start = 0
        while start < n:
            t0 = time[order[start]]
            stop = start
            while stop < n and time[order[stop]] == t0:
                i = order[stop]
                r = w[i] * exp(eta[i] - shift)
                S0 = S0 + r
                for k in range(d):
                    S1[k] = S1[k] + r * X[i, k]
                    for l in range(k + 1):
                        S2[k, l] = S2[k, l] + r * X[i, k] * X[i, l]
                stop = stop + 1
            for a in range(start, stop):
                i = order[a]
                if event[i] == 0:
                    continue
                wi = w[i]
                total = total + wi * (eta[i] - shift - log(S0))
                for k in range(d):
                    xbar_k = S1[k] / S0
                    g[k] = g[k] + wi * (X[i, k] - xbar_k)
                    for l in range(k + 1):
                        xbar_l = S1[l] / S0
                        H[k, l] = H[k, l] - wi * (S2[k, l] / S0 - xbar_k * xbar_l)
            start = stop
        for k in range(d):
            for l in range(k):
                H[l, k] = H[k, l]
    return total, grad_arr, hess_arr
