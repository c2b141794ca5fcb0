"""Backend selection for the accumulation kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used.  Set ``MEANSCORE_BACKEND=python`` to force the
fallback (the test-suite runs both backends against each other).
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_requested = os.environ.get("MEANSCORE_BACKEND", "").strip().lower()
if _ckernels is not None and _requested != "python":
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def _prep_discrete(y, event, X):
    return (
        np.ascontiguousarray(y, dtype=np.int64),
        np.ascontiguousarray(event, dtype=np.uint8),
        np.ascontiguousarray(X, dtype=np.float64),
    )


def accumulate(y, event, X, w, alpha, beta, link, order=2, backend=None):
    y, event, X = _prep_discrete(y, event, X)
    return get_backend(backend).accumulate(
        y, event, X,
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
        int(link), int(order),
    )


def subject_scores(y, event, X, alpha, beta, link, backend=None):
    y, event, X = _prep_discrete(y, event, X)
    return get_backend(backend).subject_scores(
        y, event, X,
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
        int(link),
    )


def subject_loglik(y, event, X, alpha, beta, link, backend=None):
    y, event, X = _prep_discrete(y, event, X)
    return get_backend(backend).subject_loglik(
        y, event, X,
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
        int(link),
    )


def cox_accumulate(time, event, X, w, beta, backend=None):
    return get_backend(backend).cox_accumulate(
        np.ascontiguousarray(time, dtype=np.float64),
        np.ascontiguousarray(event, dtype=np.uint8),
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
    )
