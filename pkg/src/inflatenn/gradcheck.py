"""Central finite-difference gradient checks on float64 shadow parameters."""
from __future__ import annotations

import copy

import numpy as np


def relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise |a - n| / max(|a| + |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x, h=1e-3):
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def shadow64(layer):
    """Deep copy of ``layer`` with every array attribute promoted to float64."""
    twin = copy.deepcopy(layer)
    for name, value in vars(twin).items():
        if isinstance(value, np.ndarray) and value.dtype.kind == "f":
            setattr(twin, name, value.astype(np.float64))
    return twin


def check_layer(layer, x, *, train=False, seed=0, h=1e-3, rng_factory=None):
    """Compare analytic and numeric gradients of ``sum(R * layer(x))``.

    Returns a dict of max relative errors keyed by ``"input"`` and parameter
    name.  ``rng_factory`` must return an identically seeded generator on
    every call so stochastic layers reuse the same masks.
    """
    layer = shadow64(layer)
    x = np.array(x, dtype=np.float64)
    make_rng = rng_factory or (lambda: None)

    y, cache = layer.forward(x, train=train, rng=make_rng())
    r = np.random.default_rng(seed).standard_normal(y.shape)

    def loss():
        out, _ = layer.forward(x, train=train, rng=make_rng())
        return float(np.sum(out * r))

    gx, gparams = layer.backward(cache, r)
    errors = {"input": relative_error(gx, numeric_grad(loss, x, h))}
    for name, p in layer.params().items():
        errors[name] = relative_error(gparams[name], numeric_grad(loss, p, h))
    return errors
