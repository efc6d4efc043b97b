"""Finite-difference gradient checking for the autodiff engine.

Central differences with step ``h`` against a random linear projection
of the op output. The comparison uses a mixed absolute/relative bound:
``|a - b| <= tol * max(1, |a|, |b|)`` elementwise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def relative_error(a, b):
    """Worst-case mixed relative error between two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(f, arrays, index, h=1e-5):
    """Central-difference gradient of scalar ``f(arrays)`` wrt one array."""
    x = arrays[index]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arrays)
        flat[i] = orig - h
        fm = f(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(fn, arrays, rng=None, h=1e-5):
    """Compare reverse-mode gradients of ``fn`` against finite differences.

    ``fn`` maps a list of Tensors to a Tensor of any shape; the check is
    run on a fixed random projection of that output so a single scalar
    exercises every output element. Returns the worst relative error
    over all inputs.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    leaves = [T.param(a.copy()) for a in arrays]
    out = fn(leaves)
    proj = rng.standard_normal(out.data.shape)

    loss = T.sum(T.mul(out, T.Tensor(proj)))
    grads = T.backward(loss, leaves)

    def scalar(arrs):
        with T.no_grad():
            val = fn([T.Tensor(a) for a in arrs]).data
        return float(np.sum(val * proj))

    work = [a.copy() for a in arrays]
    worst = 0.0
    for i in range(len(arrays)):
        num = numeric_grad(scalar, work, i, h=h)
        worst = max(worst, relative_error(grads[i].data, num))
    return worst
