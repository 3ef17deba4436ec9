"""Independent reference computations used by the tests.

Nothing here imports the autodiff engine; gradients come from central
differences and metrics from explicit pixel sets.
"""

import math

import numpy as np

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


def central_difference(f, x, h=FD_STEP):
    """d f / d x for scalar-valued ``f`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def grad_mismatch(analytic, numeric):
    """Entries violating |a - n| <= max(REL_TOL * max(|a|, |n|), ABS_TOL)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    allowed = np.maximum(REL_TOL * np.maximum(np.abs(analytic), np.abs(numeric)), ABS_TOL)
    return np.argwhere(np.abs(analytic - numeric) > allowed)


def ce_reference(z, label):
    """Cross-entropy of one logit row, in plain float arithmetic."""
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return lse - z[label]


def pixel_set_metrics(pred, truth):
    """Confusion counts and rates from explicit index sets."""
    P = {i for i, v in enumerate(pred) if v == 1}
    T = {i for i, v in enumerate(truth) if v == 1}
    n = len(pred)
    tp, fp, fn = len(P & T), len(P - T), len(T - P)
    tn = n - tp - fp - fn
    sens = tp / (tp + fn) if tp + fn else None
    prec = tp / (tp + fp) if tp + fp else None
    dsc = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None
    return tp, fp, fn, tn, sens, prec, dsc
