"""Algebra contract, truncation/stopping parameters and the truncated fixed-point driver."""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

MultiIndex = Tuple[int, ...]


class HadalgError(Exception):
    """Base class for errors raised by this package."""


class ShapeMismatchError(HadalgError, ValueError):
    pass


class DivergenceError(HadalgError):
    """A fixed-point iteration produced non-finite values.

    The partial :class:`IterationReport` is available as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateIterateError(HadalgError, ZeroDivisionError):
    pass


class NumericalError(HadalgError, ArithmeticError):
    pass


class DenseCapError(HadalgError, MemoryError):
    pass


@dataclass(frozen=True)
class Shape:
    """Mode sizes ``(M_1, ..., M_d)`` of a tensor."""

    mode_sizes: Tuple[int, ...]

    def __init__(self, mode_sizes):
        sizes = tuple(int(m) for m in mode_sizes)
        if len(sizes) < 1:
            raise ValueError("a shape needs at least one mode")
        if any(m < 1 for m in sizes):
            raise ValueError(f"mode sizes must be positive, got {sizes}")
        object.__setattr__(self, "mode_sizes", sizes)

    @property
    def d(self) -> int:
        return len(self.mode_sizes)

    @property
    def size(self) -> int:
        """Total number of entries as an exact Python integer."""
        return math.prod(self.mode_sizes)

    def __iter__(self):
        return iter(self.mode_sizes)

    def __len__(self):
        return len(self.mode_sizes)

    def __getitem__(self, k):
        return self.mode_sizes[k]

    def check_index(self, index: Sequence[int]) -> MultiIndex:
        idx = tuple(int(i) for i in index)
        if len(idx) != self.d:
            raise IndexError(f"index {idx} has {len(idx)} entries, shape has {self.d} modes")
        for i, m in zip(idx, self.mode_sizes):
            if not 0 <= i < m:
                raise IndexError(f"index {idx} out of range for shape {self.mode_sizes}")
        return idx

    def linear_index(self, index: Sequence[int]) -> int:
        """Row-major position of ``index`` (last mode varies fastest)."""
        lin = 0
        for i, m in zip(self.check_index(index), self.mode_sizes):
            lin = lin * m + i
        return lin


def as_shape(shape: Union[Shape, Sequence[int]]) -> Shape:
    return shape if isinstance(shape, Shape) else Shape(shape)


@dataclass(frozen=True)
class TruncationPolicy:
    """Parameters of the rank truncation T_eps.

    ``trigger_rank=None`` lets the iteration driver use twice the rank of the
    starting element.
    """

    epsilon: float = 1e-12
    max_rank: Optional[int] = None
    trigger_rank: Optional[int] = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.max_rank is not None and self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")
        if self.trigger_rank is not None and self.trigger_rank < 1:
            raise ValueError("trigger_rank must be >= 1")


@dataclass(frozen=True)
class StoppingRule:
    kind: str = "relative-step"
    eta: float = 1e-10
    p_exponent: int = 0
    max_iters: int = 100

    def __post_init__(self):
        if self.kind not in ("residual", "relative-step"):
            raise ValueError(f"unknown stopping rule kind {self.kind!r}")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.p_exponent not in (0, 1, 2):
            raise ValueError("p_exponent must be 0, 1 or 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class TruncationInfo:
    rank_before: int
    rank_after: int
    error: float
    tolerance_miss: bool = False


@dataclass
class StepRecord:
    delta: float
    rank_before: int
    rank_after: int
    truncated: bool
    residual: Optional[float] = None
    tolerance_miss: bool = False
    extras: dict = field(default_factory=dict)


@dataclass
class IterationReport:
    iterations: int = 0
    step_history: list = field(default_factory=list)
    converged: bool = False
    final_residual: float = float("nan")
    extras: dict = field(default_factory=dict)

    @property
    def max_rank(self) -> int:
        """Largest rank of a stored iterate (after any truncation)."""
        return max((s.rank_after for s in self.step_history), default=0)

    @property
    def max_raw_rank(self) -> int:
        """Largest rank produced by the iteration map before truncation."""
        return max((s.rank_before for s in self.step_history), default=0)

    @property
    def deltas(self):
        return [s.delta for s in self.step_history]

    @property
    def residuals(self):
        return [s.residual for s in self.step_history]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.final_residual,
            "max_rank": self.max_rank,
            "max_raw_rank": self.max_raw_rank,
            "extras": {k: _jsonable(v) for k, v in self.extras.items()},
            "steps": [
                {
                    "delta": s.delta,
                    "rank_before": s.rank_before,
                    "rank_after": s.rank_after,
                    "truncated": s.truncated,
                    "residual": s.residual,
                }
                for s in self.step_history
            ],
        }


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


class AlgebraElement(ABC):
    """An element of the Hadamard algebra over a fixed :class:`Shape`.

    Backends implement the vector-space operations, the Hadamard (entrywise)
    product, the Euclidean inner product and a rank truncation.  Elements are
    immutable; every operation returns a new object.
    """

    shape: Shape

    @abstractmethod
    def add(self, other: "AlgebraElement") -> "AlgebraElement": ...

    @abstractmethod
    def scale(self, alpha: float) -> "AlgebraElement": ...

    @abstractmethod
    def hadamard(self, other: "AlgebraElement") -> "AlgebraElement": ...

    @abstractmethod
    def inner(self, other: "AlgebraElement") -> float: ...

    @abstractmethod
    def entry(self, index: Sequence[int]) -> float: ...

    @property
    @abstractmethod
    def rank(self) -> int: ...

    @abstractmethod
    def truncate(self, policy: TruncationPolicy) -> Tuple["AlgebraElement", TruncationInfo]:
        """Recompress; returns the new element and a :class:`TruncationInfo`."""

    @classmethod
    @abstractmethod
    def unit(cls, shape) -> "AlgebraElement": ...

    @classmethod
    @abstractmethod
    def zero(cls, shape) -> "AlgebraElement": ...

    @classmethod
    @abstractmethod
    def elementary(cls, shape, factors: Sequence[np.ndarray]) -> "AlgebraElement":
        """Rank-one element ``factors[0] x ... x factors[d-1]``."""

    @abstractmethod
    def peak_index(self, rel_tol: float = 0.5) -> MultiIndex:
        """Locate the dominant entry of a near rank-one, nonnegative-ish element.

        Walks the modes left to right; at each mode the smallest index whose
        slice carries at least ``rel_tol`` times the mass of the heaviest
        slice is kept, so exact ties resolve to the smallest row-major index.
        """

    @abstractmethod
    def to_dense(self): ...

    def norm(self) -> float:
        return math.sqrt(max(self.inner(self), 0.0))

    def dist(self, other: "AlgebraElement") -> float:
        """``||self - other||``; backends override with a more accurate route."""
        return self.add(other.scale(-1.0)).norm()

    def square(self) -> "AlgebraElement":
        return self.hadamard(self)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.norm()))

    def same_kind_unit(self) -> "AlgebraElement":
        return type(self).unit(self.shape)

    def basis(self, index: Sequence[int]) -> "AlgebraElement":
        """Canonical unit tensor e^(m) (rank one)."""
        idx = self.shape.check_index(index)
        factors = []
        for i, m in zip(idx, self.shape):
            f = np.zeros(m)
            f[i] = 1.0
            factors.append(f)
        return type(self).elementary(self.shape, factors)

    def uniform_weights(self, power: float = 1.0) -> "AlgebraElement":
        """Rank-one element with every entry equal to ``N**(-power)``."""
        return type(self).elementary(
            self.shape, [np.full(m, float(m) ** (-power)) for m in self.shape]
        )

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.add(other.scale(-1.0))

    def __neg__(self):
        return self.scale(-1.0)

    def __mul__(self, alpha):
        if isinstance(alpha, AlgebraElement):
            return self.hadamard(alpha)
        return self.scale(float(alpha))

    __rmul__ = __mul__

    def _check_same_shape(self, other: "AlgebraElement"):
        if self.shape != other.shape:
            raise ShapeMismatchError(f"shape mismatch: {self.shape.mode_sizes} vs {other.shape.mode_sizes}")
        if type(self) is not type(other):
            raise TypeError(f"cannot combine {type(self).__name__} with {type(other).__name__}")


def state_functional(w: AlgebraElement) -> float:
    """phi(w) = <w, 1>, the sum of all entries."""
    return w.inner(w.same_kind_unit())


def residual_stop(F_of_v: Union[AlgebraElement, float], eta: float) -> bool:
    """True iff ``||F(v)|| < eta``.  Accepts an element or a precomputed norm."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    size = F_of_v.norm() if isinstance(F_of_v, AlgebraElement) else float(F_of_v)
    return size < eta


def relative_step(v_prev: AlgebraElement, v_curr: AlgebraElement) -> Tuple[float, float]:
    """Return ``(delta, ||v_curr||)`` with delta = ||v_curr - v_prev|| / ||v_curr||."""
    nrm = v_curr.norm()
    if nrm == 0.0:
        raise DegenerateIterateError("current iterate has zero norm")
    return v_curr.dist(v_prev) / nrm, nrm


def step_stop(v_prev: AlgebraElement, v_curr: AlgebraElement, eta: float, p: int = 0) -> bool:
    """True iff ``delta_i < ||v_i||**p * eta``."""
    if p not in (0, 1, 2):
        raise ValueError("p must be 0, 1 or 2")
    delta, nrm = relative_step(v_prev, v_curr)
    return delta < nrm**p * eta


PhiResult = Union[AlgebraElement, Tuple[AlgebraElement, dict]]


def truncated_fixed_point(
    phi: Callable[[AlgebraElement], PhiResult],
    v0: AlgebraElement,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    residual: Optional[Callable[[AlgebraElement], float]] = None,
    min_iters: int = 1,
) -> Tuple[AlgebraElement, IterationReport]:
    """Iterate ``v <- T_eps(phi(v))`` until the stopping rule fires.

    ``phi`` may return either the next element or ``(element, extras)``; the
    extras dict is stored on the step record and the last one is copied into
    ``report.extras``.  ``residual`` maps an iterate to ``||F(v)||``; it is
    required for ``kind="residual"`` unless the fixed-point residual
    ``||phi(v) - v||`` is wanted, which is used when it is omitted.
    Truncation runs only when the raw rank exceeds ``policy.trigger_rank``.
    """
    policy = policy or TruncationPolicy()
    stop = stop or StoppingRule()
    report = IterationReport()
    if not v0.is_finite():
        raise DivergenceError("starting element is not finite", report)
    trigger = policy.trigger_rank or max(1, 2 * v0.rank)

    v = v0
    for i in range(1, stop.max_iters + 1):
        out = phi(v)
        z, extras = (out if isinstance(out, tuple) else (out, {}))
        rank_before = z.rank
        truncated = False
        miss = False
        if rank_before > trigger:
            z, info = z.truncate(policy)
            truncated = True
            miss = info.tolerance_miss
        nrm = z.norm()
        if not np.isfinite(nrm):
            report.extras.update(extras)
            raise DivergenceError(f"non-finite iterate at step {i}", report)
        if nrm == 0.0:
            raise DegenerateIterateError(f"iterate vanished at step {i}")
        step = v.dist(z)
        delta = step / nrm
        res = None
        if residual is not None:
            res = float(residual(z))
        elif stop.kind == "residual":
            res = step
        if res is not None and not np.isfinite(res):
            raise DivergenceError(f"non-finite residual at step {i}", report)
        report.step_history.append(
            StepRecord(delta, rank_before, z.rank, truncated, res, miss, dict(extras))
        )
        report.iterations = i
        report.extras.update(extras)
        v = z

        if stop.kind == "residual":
            report.final_residual = res
            done = res < stop.eta
        else:
            report.final_residual = delta
            done = delta < nrm**stop.p_exponent * stop.eta
        if done and i >= min_iters:
            report.converged = True
            break
    return v, report


def sequential_peak(shape: Shape, slice_sq, rel_tol: float = 0.5) -> MultiIndex:
    """Left-to-right mode walk used by every backend's ``peak_index``.

    ``slice_sq(prefix)`` returns, for each value of the next mode, the squared
    norm of the sub-tensor with leading indices ``prefix + (m,)``.  The first
    candidate carrying at least ``rel_tol`` times the heaviest slice is kept.
    For an eigenvector spread evenly over several tied peaks this selects the
    tie with the smallest row-major index.
    """
    prefix: list = []
    for _ in range(shape.d):
        s = np.asarray(slice_sq(tuple(prefix)), dtype=float)
        top = float(np.max(s))
        ok = np.flatnonzero(s >= rel_tol * top) if top > 0 else np.array([0])
        prefix.append(int(ok[0]))
    return tuple(prefix)
