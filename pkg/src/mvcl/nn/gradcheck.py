"""Central finite-difference checks for layers and arbitrary scalar functions."""
from __future__ import annotations

import numpy as np


def numerical_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx].copy()
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_layer(layer, x, train=True, h=1e-6, seed=0):
    """Compare a layer's backward pass with finite differences of ``sum(w * forward(x))``.

    Returns ``{name: relative error}`` for the input and every parameter.
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(x, train)
    w = rng.normal(size=out.shape)

    def loss():
        return float((layer.forward(x, train) * w).sum())

    loss()
    dx = layer.backward(w)
    analytic = {"input": dx}
    analytic.update({k: v.copy() for k, v in layer.grads.items()})
    errors = {"input": rel_error(analytic["input"], numerical_grad(loss, x, h))}
    for name, p in layer.params.items():
        errors[name] = rel_error(analytic[name], numerical_grad(loss, p, h))
    return errors
