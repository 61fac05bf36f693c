"""Synthetic tensors: random CP/TT, the Poisson right-hand side, grid sampling."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import as_shape
from .cp import CpTensor
from .dense import dense_from_function
from .tt import TtTensor

KINDS = ("random-cp", "random-tt", "poisson-rhs", "function-sample", "level-family")


def grid(n: int) -> np.ndarray:
    """Interior grid points ``x_j = j/(n+1)``, ``j = 1..n``."""
    return np.arange(1, n + 1) / (n + 1)


def bubble(n: int) -> np.ndarray:
    """``x (1 - x)`` on the interior grid, computed as ``j (n+1-j) / (n+1)**2``.

    The integer numerator makes the vector bitwise symmetric, so mirrored grid
    points give exactly equal tensor entries.
    """
    j = np.arange(1, n + 1)
    return (j * (n + 1 - j)).astype(float) / float((n + 1) ** 2)


def poisson_rhs(n: int, d: int) -> CpTensor:
    """Samples of ``f(x) = sum_k prod_{l != k} x_l (1 - x_l)``, exact CP rank ``d``.

    Term ``k`` has the all-ones vector in mode ``k`` and the bubble vector in
    every other mode.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    g = bubble(n)
    factors = []
    for nu in range(d):
        f = np.tile(g[:, None], (1, d))
        f[:, nu] = 1.0
        factors.append(f)
    return CpTensor((n,) * d, factors)


def poisson_rhs_function(n: int, d: int) -> Callable:
    """Pointwise sampler of the same right-hand side (0-based grid indices)."""
    g = bubble(n)

    def f(idx):
        vals = [g[i] for i in idx]
        return sum(np.prod(vals[:k] + vals[k + 1 :]) for k in range(d))

    return f


def random_cp(n: int, d: int, rank: int, seed: int = 0, shape=None) -> CpTensor:
    rng = np.random.default_rng(seed)
    shape = as_shape(shape or (n,) * d)
    return CpTensor(shape, [rng.standard_normal((m, rank)) for m in shape])


def random_tt(n: int, d: int, rank: int, seed: int = 0, shape=None) -> TtTensor:
    rng = np.random.default_rng(seed)
    shape = as_shape(shape or (n,) * d)
    ranks = [1] + [rank] * (shape.d - 1) + [1]
    cores = [rng.standard_normal((ranks[k], m, ranks[k + 1])) / np.sqrt(ranks[k] * m) for k, m in enumerate(shape)]
    return TtTensor(shape, cores)


def function_sample(shape, f: Callable):
    return dense_from_function(shape, f)


def level_family(n: int, d: int, rank: int = 4, seed: int = 0, amplitude: float = 1e-4):
    """Low-rank tensor whose level set at 0.5 has a low-rank indicator.

    A mode-1 profile (values in ``[0.1, 0.3]`` or ``[0.7, 0.9]``) is perturbed
    by ``rank - 1`` small positive terms whose entries sum to at most
    ``amplitude``.  Returns ``(w, threshold)`` with threshold 0.5; every entry
    stays at least ``0.2 - amplitude`` away from it, i.e. more than
    ``0.05 max |w|``.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if n < 2 or d < 2:
        raise ValueError("the family needs n >= 2 and d >= 2")
    rng = np.random.default_rng(seed)
    a = np.where(np.arange(n) % 2 == 0, rng.uniform(0.7, 0.9, n), rng.uniform(0.1, 0.3, n))
    factors = [np.zeros((n, rank)) for _ in range(d)]
    factors[0][:, 0] = a
    for k in range(1, d):
        factors[k][:, 0] = 1.0
    for t in range(1, rank):
        for k in range(d):
            factors[k][:, t] = rng.uniform(0.5, 1.0, n)
        factors[0][:, t] *= amplitude / (rank - 1)
    return CpTensor((n,) * d, factors), 0.5
