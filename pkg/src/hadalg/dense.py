"""Full-storage backend and brute-force oracles."""
from __future__ import annotations

import math
import os
from itertools import product
from typing import Callable, Sequence, Tuple

import numpy as np

from .core import (
    AlgebraElement,
    DenseCapError,
    MultiIndex,
    Shape,
    ShapeMismatchError,
    TruncationInfo,
    TruncationPolicy,
    as_shape,
    sequential_peak,
)

DEFAULT_DENSE_CAP = 10**7


def dense_cap() -> int:
    """Largest number of entries a dense tensor may hold (``HADALG_DENSE_CAP``)."""
    return int(os.environ.get("HADALG_DENSE_CAP", DEFAULT_DENSE_CAP))


def check_dense_cap(shape: Shape):
    if shape.size > dense_cap():
        raise DenseCapError(
            f"dense storage of {shape.size} entries exceeds the cap of {dense_cap()}"
        )


class DenseTensor(AlgebraElement):
    """Tensor stored entry by entry in row-major order.

    ``values`` is kept as an ndarray of the full shape; ``values.ravel()`` is the
    vectorisation used for file output and tie breaking.
    """

    def __init__(self, shape, values):
        shape = as_shape(shape)
        check_dense_cap(shape)
        arr = np.array(values, dtype=float).reshape(shape.mode_sizes)
        if not np.all(np.isfinite(arr)):
            raise ValueError("dense tensor entries must be finite")
        arr.setflags(write=False)
        self.shape = shape
        self.values = arr

    @classmethod
    def _wrap(cls, shape, arr):
        # skips the finiteness check so divergence can be detected by the caller
        obj = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=float)
        arr.setflags(write=False)
        obj.shape = shape
        obj.values = arr
        return obj

    def __repr__(self):
        return f"DenseTensor(shape={self.shape.mode_sizes})"

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def rank(self) -> int:
        # number of terms in the trivial basis expansion sum_m w_m e^(m)
        return int(np.count_nonzero(self.values))

    def add(self, other):
        self._check_same_shape(other)
        return DenseTensor._wrap(self.shape, self.values + other.values)

    def scale(self, alpha):
        return DenseTensor._wrap(self.shape, float(alpha) * self.values)

    def hadamard(self, other):
        return dense_hadamard(self, other)

    def inner(self, other):
        return dense_inner(self, other)

    def norm(self):
        return _norm(self.flat)

    def dist(self, other):
        self._check_same_shape(other)
        return _norm((self.values - other.values).ravel())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def entry(self, index):
        return float(self.values[self.shape.check_index(index)])

    def truncate(self, policy: TruncationPolicy):
        r = self.rank
        return self, TruncationInfo(r, r, 0.0, False)

    @classmethod
    def unit(cls, shape):
        shape = as_shape(shape)
        check_dense_cap(shape)
        return cls._wrap(shape, np.ones(shape.mode_sizes))

    @classmethod
    def zero(cls, shape):
        shape = as_shape(shape)
        check_dense_cap(shape)
        return cls._wrap(shape, np.zeros(shape.mode_sizes))

    @classmethod
    def elementary(cls, shape, factors):
        shape = as_shape(shape)
        check_dense_cap(shape)
        out = np.ones(())
        for f in factors:
            out = np.multiply.outer(out, np.asarray(f, dtype=float))
        return cls._wrap(shape, out.reshape(shape.mode_sizes))

    def peak_index(self, rel_tol: float = 0.5) -> MultiIndex:
        sq = self.values**2

        def slice_sq(prefix):
            block = sq[tuple(prefix)]
            return block.reshape(block.shape[0], -1).sum(axis=1)

        return sequential_peak(self.shape, slice_sq, rel_tol)

    def to_dense(self):
        return self


def _norm(x: np.ndarray) -> float:
    """Euclidean norm; rescaled when squaring the entries would over- or underflow."""
    top = float(np.max(np.abs(x))) if x.size else 0.0
    if top == 0.0 or not np.isfinite(top) or 1e-150 <= top <= 1e150:
        return float(np.linalg.norm(x))
    return top * float(np.linalg.norm(x / top))


def dense_hadamard(u: DenseTensor, v: DenseTensor) -> DenseTensor:
    u._check_same_shape(v)
    return DenseTensor._wrap(u.shape, u.values * v.values)


def dense_inner(u: DenseTensor, v: DenseTensor) -> float:
    u._check_same_shape(v)
    return float(np.dot(u.flat, v.flat))


def dense_argmax(w: DenseTensor) -> Tuple[MultiIndex, float]:
    """Index and value of the largest entry; ties go to the smallest linear index."""
    lin = int(np.argmax(w.flat))
    idx = tuple(int(i) for i in np.unravel_index(lin, w.shape.mode_sizes))
    return idx, float(w.flat[lin])


def dense_argmin(w: DenseTensor) -> Tuple[MultiIndex, float]:
    lin = int(np.argmin(w.flat))
    idx = tuple(int(i) for i in np.unravel_index(lin, w.shape.mode_sizes))
    return idx, float(w.flat[lin])


def dense_closest(w: DenseTensor, rho: float) -> Tuple[MultiIndex, float]:
    """Entry nearest to ``rho``; ties go to the smallest linear index."""
    lin = int(np.argmin(np.abs(w.flat - rho)))
    idx = tuple(int(i) for i in np.unravel_index(lin, w.shape.mode_sizes))
    return idx, float(w.flat[lin])


def _check_interval(interval):
    lo, hi = interval
    lo = -math.inf if lo is None else float(lo)
    hi = math.inf if hi is None else float(hi)
    if not lo < hi:
        raise ValueError(f"empty interval ]{lo}, {hi}[")
    return lo, hi


def dense_level_mask(w: DenseTensor, interval) -> np.ndarray:
    lo, hi = _check_interval(interval)
    return (w.flat > lo) & (w.flat < hi)


def dense_level_count(w: DenseTensor, interval) -> int:
    """Exact number of entries strictly inside the open interval."""
    return int(np.count_nonzero(dense_level_mask(w, interval)))


def dense_mean_var(w: DenseTensor) -> Tuple[float, float]:
    n = w.flat.size
    mean = float(np.sum(w.flat)) / n
    dev = w.flat - mean
    return mean, float(np.dot(dev, dev)) / n


def dense_spectrum(w: DenseTensor) -> list:
    """All entries sorted by decreasing absolute value (stable for equal moduli)."""
    vals = w.flat
    order = np.argsort(-np.abs(vals), kind="stable")
    return [float(x) for x in vals[order]]


def dense_sign(w: DenseTensor) -> DenseTensor:
    return DenseTensor._wrap(w.shape, np.sign(w.values))


def dense_characteristic(w: DenseTensor, interval) -> DenseTensor:
    """Indicator of the open interval with value 1/2 exactly on its finite ends."""
    lo, hi = _check_interval(interval)
    x = w.values
    upper = np.ones_like(x) if math.isinf(hi) else np.sign(hi - x)
    lower = -np.ones_like(x) if math.isinf(lo) else np.sign(lo - x)
    return DenseTensor._wrap(w.shape, 0.5 * (upper - lower))


def dense_from_function(shape, f: Callable[[MultiIndex], float]) -> DenseTensor:
    """Sample ``f`` at every 0-based multi-index of ``shape``."""
    shape = as_shape(shape)
    check_dense_cap(shape)
    vals = np.fromiter(
        (f(idx) for idx in product(*(range(m) for m in shape))),
        dtype=float,
        count=shape.size,
    )
    return DenseTensor(shape, vals)


def dense_spectral_resolution(w: DenseTensor) -> DenseTensor:
    """Rebuild ``w`` as the sum of ``w_m e^(m)`` over all positions."""
    out = np.zeros(w.shape.size)
    for lin, val in enumerate(w.flat):
        e = np.zeros(w.shape.size)
        e[lin] = 1.0
        out = out + val * e
    return DenseTensor(w.shape, out)
