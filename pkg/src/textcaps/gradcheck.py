"""Finite-difference gradient checking for the hand-written backward passes.

Every differentiable op in this package ships an analytic backward; the tests
drive them all through :func:`grad_check`, which compares the analytic gradient
against central differences element by element and reports the worst relative
error.  Run in float64 — the ~1e-4 acceptance threshold is meaningless in
single precision.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def rel_err(analytic, numeric):
    """|a - n| / max(|a|, |n|, tiny), elementwise -> max."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _EPS)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(op_handle, x, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Parameters
    ----------
    op_handle : callable
        ``op_handle(x) -> (loss, grad)`` where ``loss`` is a float and ``grad``
        has the shape of ``x``.  It must be deterministic in ``x``.
    x : ndarray
        Point at which to check; swept element by element.
    step : float
        Central-difference half-step.

    Raises ``FloatingPointError`` if any probed loss or the analytic gradient
    is non-finite.
    """
    x = np.array(x, dtype=np.float64)
    _, grad = op_handle(x)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} != input shape {x.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("analytic gradient contains non-finite values")

    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lo_hi, _ = op_handle(x)
        flat[i] = orig - step
        lo_lo, _ = op_handle(x)
        flat[i] = orig
        if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
            raise FloatingPointError(f"non-finite loss while probing element {i}")
        num_flat[i] = (lo_hi - lo_lo) / (2.0 * step)
    return rel_err(grad, numeric)


def scalarize(forward, backward, seed=0):
    """Turn a tensor-valued op into a scalar-loss handle for :func:`grad_check`.

    ``forward(x)`` returns a tensor ``y``; ``backward(dy, x)`` returns ``dx``.
    The scalar loss is ``sum(y * R)`` for a fixed random projection ``R`` drawn
    once from *seed*, so the check exercises every output element with distinct
    weights.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    proj = {}

    def handle(x):
        y = np.asarray(forward(x))
        if "R" not in proj:
            proj["R"] = rng.standard_normal(y.shape)
        r = proj["R"]
        loss = float(np.sum(y * r))
        dx = backward(r.astype(np.float64), x)
        return loss, dx

    return handle
