"""Shared test oracles: central finite differences and gradient comparison."""

from __future__ import annotations

import numpy as np

from sa2sr import autodiff as ad
from sa2sr.autodiff import Tape, backward


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over entries of |analytic - numeric| / max(1, |numeric|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def analytic_grads(build, arrays: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Run build(leaves) -> scalar DiffArray under a tape, return value and grads."""
    leaves = [ad.leaf(a) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
    value = float(out.values)
    backward(tape, out)
    return value, [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values) for leaf in leaves]


def check_gradients(build, arrays: list[np.ndarray], h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare analytic gradients of build(*leaves) against central differences.

    Returns the worst relative error over all arrays; asserts it is <= tol.
    """
    _, grads = analytic_grads(build, arrays)
    worst = 0.0
    for i, base in enumerate(arrays):

        def f(x, i=i):
            probe = [np.array(a, dtype=np.float64) for a in arrays]
            probe[i] = x
            leaves = [ad.leaf(a, requires_grad=False) for a in probe]
            return float(build(*leaves).values)

        worst = max(worst, rel_err(grads[i], numeric_grad(f, np.array(base, dtype=np.float64), h)))
    assert worst <= tol, f"gradient check failed: relative error {worst:.3e} > {tol}"
    return worst


def check_param_gradients(store, names, forward_scalar, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Finite-difference check for named ParameterStore entries against the
    analytic gradients of forward_scalar() (a fresh scalar DiffArray per call).
    """
    store.zero_grads()
    with Tape() as tape:
        out = forward_scalar()
    backward(tape, out)
    analytic = {
        name: (store[name].grad.copy() if store[name].grad is not None
               else np.zeros_like(store[name].values))
        for name in names
    }
    store.zero_grads()
    worst = 0.0
    for name in names:
        p = store[name]

        def f(x, p=p):
            saved = p.values.copy()
            p.values[...] = x
            value = float(forward_scalar().values)
            p.values[...] = saved
            return value

        numeric = numeric_grad(f, p.values.copy(), h)
        err = rel_err(analytic[name], numeric)
        worst = max(worst, err)
        assert err <= tol, f"{name}: gradient relative error {err:.3e} > {tol}"
    return worst
