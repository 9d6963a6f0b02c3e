"""Central finite-difference helpers for verifying hand-written backprop."""
import numpy as np


def numeric_gradient(f, x, eps=1e-3, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    Returns an array shaped like ``x``; entries outside ``indices`` are NaN.
    """
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest entrywise |a - n| / max(|a|, |n|, floor) over the finite entries of ``numeric``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    m = np.isfinite(n)
    a, n = a[m], n[m]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
