"""Float64 array primitives shared by every other module.

All math in this package runs in numpy float64: the gradient-check bound
assumed throughout (1e-4 relative error at eps=1e-5) is only reachable at
that precision. Randomness comes exclusively through :class:`Rng`, a thin
wrapper around numpy's Philox 4x64 counter-based bit generator, so equal
seeds give byte-identical streams on every platform.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ParamStore",
    "Rng",
    "grad_check",
    "masked_mean_over_time",
    "matmul",
    "pointwise",
    "sigmoid",
]


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x))."""
    # exp may overflow to inf for very negative x; 1 / (1 + inf) = 0 is the
    # right answer, so just silence the warning.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


_UNARY_OPS = {"tanh": np.tanh, "sigmoid": sigmoid}
_BINARY_OPS = {"add": np.add, "mul": np.multiply}


def pointwise(op, *args):
    """Elementwise tanh/sigmoid (one argument) or add/mul (two arguments).

    Binary operands must have exactly equal shapes; no broadcasting.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in args]
    if op in _UNARY_OPS:
        if len(arrays) != 1:
            raise ValueError(f"pointwise {op!r} takes one argument, got {len(arrays)}")
        return _UNARY_OPS[op](arrays[0])
    if op in _BINARY_OPS:
        if len(arrays) != 2:
            raise ValueError(f"pointwise {op!r} takes two arguments, got {len(arrays)}")
        a, b = arrays
        if a.shape != b.shape:
            raise ValueError(f"pointwise {op!r} shape mismatch: {a.shape} vs {b.shape}")
        return _BINARY_OPS[op](a, b)
    raise ValueError(f"unknown pointwise op {op!r}")


def matmul(a, b):
    """Matrix product of two rank-2 arrays with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def masked_mean_over_time(seq, mask):
    """Mean of the rows of ``seq [T, H]`` where ``mask [T]`` is nonzero.

    Padded rows (mask 0) contribute nothing; an all-zero mask is an error.
    """
    seq = np.asarray(seq, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if seq.ndim != 2 or mask.ndim != 1 or mask.shape[0] != seq.shape[0]:
        raise ValueError(f"masked mean shape mismatch: seq {seq.shape}, mask {mask.shape}")
    n = mask.sum()
    if n == 0:
        raise ValueError("masked mean over an all-padded sequence")
    return (seq * mask[:, None]).sum(axis=0) / n


class ParamStore:
    """Ordered name -> (value, gradient) storage for trainable arrays.

    Gradient arrays always share their value's shape. Iteration order is
    insertion order, which fixes both the byte layout of saved models and
    the coordinate order of the gradient checker. Gradient accumulation is
    single-writer: never drive one store from two threads.
    """

    def __init__(self):
        self._entries: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name, value):
        """Register a new parameter; returns the stored float64 array."""
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._entries[name] = (arr, np.zeros_like(arr))
        return arr

    def value(self, name):
        return self._entries[name][0]

    def grad(self, name):
        return self._entries[name][1]

    def accumulate(self, name, delta):
        """grad(name) += delta, in place."""
        grad = self._entries[name][1]
        grad += delta

    def names(self):
        return list(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def zero_grads(self):
        for _, grad in self._entries.values():
            grad[...] = 0.0

    def num_values(self):
        """Total number of stored scalars (the trainable parameter count)."""
        return sum(value.size for value, _ in self._entries.values())


# Mixing constant from splitmix64; used to derive independent child seeds.
_DERIVE_MULT = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic random stream keyed by a 64-bit seed.

    Backed by numpy's Philox 4x64 counter-based generator. Every dataset
    synthesis and weight initialization draw in this package goes through
    one of these, so a seed pins the whole artifact byte-for-byte.
    """

    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, salt):
        """Child stream with a seed mixed from (seed, salt); deterministic."""
        mixed = (self.seed * _DERIVE_MULT + int(salt) + 1) & _MASK64
        return Rng(mixed)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)


def grad_check(f, params, eps=1e-5):
    """Compare analytic gradients against central finite differences.

    ``f(params)`` must return a scalar loss for the current parameter values
    and, as a side effect, populate the store's gradients (re-zeroing them
    first is ``f``'s responsibility; ``loss_and_grads`` does). Returns the
    maximum over all parameter coordinates of

        |analytic - numeric| / max(1e-8, |analytic| + |numeric|)

    where numeric = (f(theta+eps) - f(theta-eps)) / (2 eps).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = float(f(params))
    if not np.isfinite(base):
        raise FloatingPointError("grad_check: non-finite loss at the base point")
    analytic = {name: params.grad(name).copy() for name in params.names()}
    worst = 0.0
    for name in params.names():
        flat = params.value(name).reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(params))
            flat[i] = orig - eps
            f_minus = float(f(params))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"grad_check: non-finite loss while perturbing {name!r}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst
