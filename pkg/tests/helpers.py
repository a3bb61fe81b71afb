"""Shared oracles for the test suite.

The finite-difference gradient here is the independent check for every
backward implementation: it only ever calls the forward function, with no
tape active, so it cannot inherit a bug from the reverse-mode code.
"""

import numpy as np


def finite_difference_grads(f, params, h=1e-5):
    """Central differences of the scalar ``f()`` wrt each parameter entry.

    ``f`` must be a zero-argument callable returning a float and reading the
    current parameter values; entries are perturbed in place and restored.
    """
    grads = []
    for p in params:
        flat = p.value.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(p.value.data.shape))
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a-n| / max(|a|, |n|, floor); the floor keeps sub-noise entries
    from dominating where the finite-difference estimate itself is meaningless."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
