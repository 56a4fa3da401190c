"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from mixedae.nn import Parameter


def numeric_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn, one coordinate at a time."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn()
        flat[i] = keep - step
        lo = fn()
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    # the denominator floor keeps finite-difference noise (~1e-10 absolute for
    # central differences at step 1e-5) from registering as relative error on
    # coordinates whose true gradient is zero
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-5)
    return float(np.max(np.abs(a - n) / denom))


def check_param_grads(build_loss, params: list[Parameter], tol: float = 1e-6):
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        n = numeric_grad(lambda: build_loss().item(), p.data)
        assert rel_err(a, n) < tol, f"gradient mismatch for {p.name}"
