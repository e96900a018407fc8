"""Array policy shared by every layer: dtypes, finite-value checking, parameters.

Tensors are plain ``numpy.ndarray``s in channels-last layout ``(N, H, W, C)``.
This module holds the small amount of machinery that keeps the rest of the
package honest about precision and numerical health:

* a package-wide *checked mode* that makes every kernel validate its output
  for NaN/Inf (cheap insurance while debugging, off by default),
* ``Param``/``ParamStore`` — named parameter tensors with gradient slots,
* seeded initializers built on ``np.random.Generator(PCG64(seed))`` so that
  two runs with the same seed produce bit-identical weights.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

# Training may run in single precision for speed; tests and oracles use double.
SINGLE = np.float32
DOUBLE = np.float64

_checked = False


def set_checked(enabled):
    """Globally enable/disable finite-value validation inside kernels."""
    global _checked
    _checked = bool(enabled)


def is_checked():
    return _checked


@contextlib.contextmanager
def checked_mode():
    """Context manager form of :func:`set_checked` for tests."""
    global _checked
    prev = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = prev


def ensure_finite(arr, what):
    """Raise ``FloatingPointError`` if *arr* contains NaN or Inf.

    Called unconditionally by a few entry points (training-loss guard) and by
    every kernel when checked mode is on.
    """
    if not np.all(np.isfinite(arr)):
        bad = np.size(arr) - np.count_nonzero(np.isfinite(arr))
        raise FloatingPointError(f"{what}: {bad} non-finite value(s)")
    return arr


def maybe_check(arr, what):
    if _checked:
        ensure_finite(arr, what)
    return arr


def resolve_dtype(precision):
    """Map a precision name ('single'/'double') or dtype to a numpy dtype."""
    if precision in ("single", "float32", np.float32, SINGLE):
        return SINGLE
    if precision in ("double", "float64", np.float64, DOUBLE):
        return DOUBLE
    raise ValueError(f"unknown precision {precision!r} (use 'single' or 'double')")


@dataclass
class Param:
    """A named parameter tensor and its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


class ParamStore:
    """Ordered mapping of parameter names to :class:`Param`.

    Insertion order is fixed by construction order, which makes optimizer
    state, checkpoints, and random init reproducible run-to-run.
    """

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, np.asarray(value))
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    def astype(self, dtype):
        """Return a new store with values cast to *dtype* (grads reset)."""
        out = ParamStore()
        for p in self._params.values():
            out.add(p.name, p.value.astype(dtype))
        return out

    def state_dict(self):
        """name -> float64 copy of the value, for checkpointing."""
        return {p.name: p.value.astype(DOUBLE, copy=True) for p in self._params.values()}

    def load_state_dict(self, state):
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if missing or extra:
            raise KeyError(f"parameter mismatch (missing={missing}, unexpected={extra})")
        for name, p in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: have {p.value.shape}, loaded {arr.shape}"
                )
            p.value = arr.astype(p.value.dtype, copy=True)
            p.zero_grad()


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=DOUBLE):
    """Glorot/Xavier uniform init: U(-a, a), a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))
