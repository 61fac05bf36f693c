"""Tensor-train backend with deterministic SVD rounding."""
from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import (
    AlgebraElement,
    MultiIndex,
    NumericalError,
    ShapeMismatchError,
    TruncationInfo,
    TruncationPolicy,
    as_shape,
    sequential_peak,
)
from .cp import CpTensor
from .dense import DenseTensor, check_dense_cap

_U = np.finfo(float).eps


class TtTensor(AlgebraElement):
    """Chain of cores; core ``k`` has shape ``(r_k, M_k, r_{k+1})`` with ``r_0 = r_d = 1``."""

    def __init__(self, shape, cores: Sequence[np.ndarray]):
        shape = as_shape(shape)
        if len(cores) != shape.d:
            raise ValueError(f"expected {shape.d} cores, got {len(cores)}")
        mats = []
        prev = 1
        for k, (m, c) in enumerate(zip(shape, cores)):
            c = np.array(c, dtype=float)
            if c.ndim != 3 or c.shape[1] != m or c.shape[0] != prev:
                raise ValueError(f"core {k} has inconsistent shape {c.shape}")
            prev = c.shape[2]
            c.setflags(write=False)
            mats.append(c)
        if prev != 1:
            raise ValueError("last TT rank must be 1")
        self.shape = shape
        self.cores = tuple(mats)

    @classmethod
    def _wrap(cls, shape, cores):
        obj = cls.__new__(cls)
        obj.shape = shape
        mats = []
        for c in cores:
            c = np.ascontiguousarray(c, dtype=float)
            c.setflags(write=False)
            mats.append(c)
        obj.cores = tuple(mats)
        return obj

    def __repr__(self):
        return f"TtTensor(shape={self.shape.mode_sizes}, ranks={self.tt_ranks})"

    @property
    def tt_ranks(self) -> Tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    @property
    def rank(self) -> int:
        return max(self.tt_ranks)

    def add(self, other):
        return tt_add(self, other)

    def scale(self, alpha):
        return tt_scale(alpha, self)

    def hadamard(self, other):
        return tt_hadamard(self, other)

    def inner(self, other):
        return tt_inner(self, other)

    def norm(self):
        return tt_norm(self)

    def dist(self, other):
        self._check_same_shape(other)
        return tt_norm(tt_add(self, tt_scale(-1.0, other)))

    def entry(self, index):
        return tt_entry(self, index)

    def truncate(self, policy):
        return tt_round(self, policy)

    @classmethod
    def unit(cls, shape):
        return tt_unit(shape)

    @classmethod
    def zero(cls, shape):
        shape = as_shape(shape)
        return cls._wrap(shape, [np.zeros((1, m, 1)) for m in shape])

    @classmethod
    def elementary(cls, shape, factors):
        shape = as_shape(shape)
        return cls(shape, [np.asarray(f, dtype=float).reshape(1, -1, 1) for f in factors])

    def to_dense(self):
        return tt_to_dense(self)

    def peak_index(self, rel_tol: float = 0.5) -> MultiIndex:
        d = self.shape.d
        right = [None] * (d + 1)
        right[d] = np.ones((1, 1))
        for k in range(d - 1, -1, -1):
            c = self.cores[k]
            right[k] = np.einsum("amb,bc,dmc->ad", c, right[k + 1], c)
        left = [np.ones((1, 1))]

        def slice_sq(prefix):
            k = len(prefix)
            if k:
                left.append(left[-1] @ self.cores[k - 1][:, prefix[-1], :])
            q = np.einsum("xa,amb->mb", left[-1], self.cores[k])
            return np.einsum("mb,bc,mc->m", q, right[k + 1], q)

        return sequential_peak(self.shape, slice_sq, rel_tol)


def _check_pair(u: TtTensor, v: TtTensor):
    if u.shape != v.shape:
        raise ShapeMismatchError(f"shape mismatch: {u.shape.mode_sizes} vs {v.shape.mode_sizes}")


def tt_unit(shape) -> TtTensor:
    shape = as_shape(shape)
    return TtTensor._wrap(shape, [np.ones((1, m, 1)) for m in shape])


def tt_scale(alpha: float, w: TtTensor) -> TtTensor:
    """Multiply the first core by ``alpha``.

    When that would push the core far from unit size (normalising a tensor
    whose entries are ~1e-90, say) the factor is spread over all cores.
    """
    alpha = float(alpha)
    cores = list(w.cores)
    first = alpha * cores[0]
    size = float(np.linalg.norm(first))
    if alpha == 0.0 or size == 0.0 or 1e-50 <= size <= 1e50:
        cores[0] = first
        return TtTensor._wrap(w.shape, cores)
    d = w.shape.d
    mag = math.exp(math.log(abs(alpha)) / d)
    cores = _rebalance([c * mag for c in cores])
    if alpha < 0:
        cores[0] = -cores[0]
    return TtTensor._wrap(w.shape, cores)


def tt_add(u: TtTensor, v: TtTensor) -> TtTensor:
    """Block-diagonal concatenation; interior ranks add."""
    _check_pair(u, v)
    d = u.shape.d
    if d == 1:
        return TtTensor._wrap(u.shape, [u.cores[0] + v.cores[0]])
    cores = []
    for k, (a, b) in enumerate(zip(u.cores, v.cores)):
        if k == 0:
            cores.append(np.concatenate([a, b], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([a, b], axis=0))
        else:
            ra0, m, ra1 = a.shape
            rb0, _, rb1 = b.shape
            c = np.zeros((ra0 + rb0, m, ra1 + rb1))
            c[:ra0, :, :ra1] = a
            c[ra0:, :, ra1:] = b
            cores.append(c)
    return TtTensor._wrap(u.shape, cores)


def tt_hadamard(u: TtTensor, v: TtTensor) -> TtTensor:
    """Core-wise Kronecker product over the rank indices; interior ranks multiply."""
    _check_pair(u, v)
    cores = []
    # balanced operands keep the core products inside the float range
    for a, b in zip(_rebalance(u.cores), _rebalance(v.cores)):
        ra0, m, ra1 = a.shape
        rb0, _, rb1 = b.shape
        cores.append(np.einsum("amb,cmd->acmbd", a, b).reshape(ra0 * rb0, m, ra1 * rb1))
    return TtTensor._wrap(u.shape, _rebalance(cores))


def _rebalance(cores):
    """Give every core the same Frobenius norm (products of cores drift apart otherwise)."""
    norms = np.array([np.linalg.norm(c) for c in cores])
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        return cores
    target = np.exp(np.mean(np.log(norms)))
    return [c * (target / n) for c, n in zip(cores, norms)]


def _rescaled(g, log_scale):
    """Divide ``g`` by its largest modulus and add the log of that to ``log_scale``.

    Long core chains can pass through partial products far outside the float
    range even when the final value is moderate.
    """
    s = float(np.max(np.abs(g)))
    if s == 0.0 or not np.isfinite(s) or 1e-100 <= s <= 1e100:
        # in range: leave the data untouched so results stay bit-reproducible
        return g, log_scale, s
    return g / s, log_scale + math.log(s), s


def _unscale(x: float, log_scale: float) -> float:
    if x == 0.0 or log_scale == 0.0:
        return x
    return math.copysign(math.exp(math.log(abs(x)) + log_scale), x)


def tt_inner(u: TtTensor, v: TtTensor) -> float:
    _check_pair(u, v)
    g = np.ones((1, 1))
    log_scale = 0.0
    for a, b in zip(u.cores, v.cores):
        t = np.einsum("ab,amc->bmc", g, a)
        g, log_scale, s = _rescaled(np.einsum("bmc,bmd->cd", t, b), log_scale)
        if s == 0.0:
            return 0.0
    return _unscale(float(g[0, 0]), log_scale)


def tt_norm(w: TtTensor) -> float:
    """Norm via a left-to-right QR sweep (no squaring of the data)."""
    r = np.ones((1, 1))
    log_scale = 0.0
    for c in w.cores:
        m = np.einsum("ab,bmc->amc", r, c)
        a0, n, a1 = m.shape
        mat = m.reshape(a0 * n, a1)
        if mat.shape[0] >= mat.shape[1]:
            r = np.linalg.qr(mat, mode="r")
        else:
            r = mat
        r, log_scale, s = _rescaled(r, log_scale)
        if s == 0.0:
            return 0.0
    return _unscale(float(np.linalg.norm(r)), log_scale)


def tt_entry(w: TtTensor, index) -> float:
    idx = w.shape.check_index(index)
    p = w.cores[0][:, idx[0], :]
    log_scale = 0.0
    for c, i in zip(w.cores[1:], idx[1:]):
        p, log_scale, s = _rescaled(p @ c[:, i, :], log_scale)
        if s == 0.0:
            return 0.0
    return _unscale(float(p[0, 0]), log_scale)


def tt_to_dense(w: TtTensor) -> DenseTensor:
    check_dense_cap(w.shape)
    full = w.cores[0].reshape(w.shape[0], -1)
    for c in w.cores[1:]:
        r0, m, r1 = c.shape
        full = (full @ c.reshape(r0, m * r1)).reshape(-1, r1)
    return DenseTensor._wrap(w.shape, full.reshape(w.shape.mode_sizes))


def _right_orthogonalize(cores):
    cores = list(cores)
    for k in range(len(cores) - 1, 0, -1):
        r0, m, r1 = cores[k].shape
        q, r = np.linalg.qr(cores[k].reshape(r0, m * r1).T)
        cores[k] = q.T.reshape(-1, m, r1)
        cores[k - 1] = np.einsum("amb,cb->amc", cores[k - 1], r)
    return cores


def tt_round(w: TtTensor, policy: TruncationPolicy) -> Tuple[TtTensor, TruncationInfo]:
    """Right-to-left QR sweep, then left-to-right truncated SVDs.

    The per-unfolding cutoff is ``eps ||w|| / sqrt(d - 1)`` so that the total
    error stays below ``eps ||w||``.  Singular values at the level of the unit
    roundoff are dropped even for ``eps = 0``.
    """
    d = w.shape.d
    rank_before = w.rank
    cores = _right_orthogonalize(w.cores)
    nrm = float(np.linalg.norm(cores[0]))
    if not np.isfinite(nrm):
        raise NumericalError("non-finite TT core during rounding")
    if nrm == 0.0:
        z = TtTensor.zero(w.shape)
        return z, TruncationInfo(rank_before, 1, 0.0, False)
    if d == 1:
        return TtTensor._wrap(w.shape, cores), TruncationInfo(rank_before, 1, 0.0, False)
    delta = policy.epsilon * nrm / math.sqrt(d - 1)
    floor = 8.0 * _U * nrm
    cut = max(delta, floor)
    err2 = 0.0
    miss = False
    for k in range(d - 1):
        r0, m, r1 = cores[k].shape
        try:
            u, s, vt = np.linalg.svd(cores[k].reshape(r0 * m, r1), full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD failed at core {k}") from exc
        tail = np.sqrt(np.cumsum((s**2)[::-1]))[::-1]  # tail[j] = ||s[j:]||
        keep = int(np.count_nonzero(tail > cut)) or 1
        if policy.max_rank is not None and keep > policy.max_rank:
            keep = policy.max_rank
            if tail[keep] > delta:
                miss = True
        err2 += float(np.sum(s[keep:] ** 2))
        cores[k] = u[:, :keep].reshape(r0, m, keep)
        cores[k + 1] = np.einsum("ab,bmc->amc", s[:keep, None] * vt[:keep], cores[k + 1])
    out = TtTensor._wrap(w.shape, cores)
    err = math.sqrt(err2)
    if err > policy.epsilon * nrm * (1 + 1e-12) + floor * math.sqrt(d):
        miss = True
    return out, TruncationInfo(rank_before, out.rank, err, miss)


def tt_from_cp(w: CpTensor, policy: Optional[TruncationPolicy] = None, chunk: int = 8) -> TtTensor:
    """TT representation of a CP tensor (interior ranks = CP rank).

    With a ``policy`` the terms are accumulated ``chunk`` at a time and the
    running sum is rounded after each chunk, so the full-rank cores are never
    formed; this is what makes rank-d inputs with d in the hundreds usable.
    """
    d, r = w.shape.d, w.rank
    if r == 0:
        return TtTensor.zero(w.shape)
    if policy is not None and r > chunk:
        acc = None
        for s in range(0, r, chunk):
            part = CpTensor._wrap(w.shape, [f[:, s : s + chunk] for f in w.factors])
            t = _tt_from_cp_exact(part)
            acc = t if acc is None else tt_add(acc, t)
            acc, _ = tt_round(acc, policy)
        return acc
    out = _tt_from_cp_exact(w)
    if policy is not None:
        out, _ = tt_round(out, policy)
    return out


def tt_from_cp_bounded(w: CpTensor, rank_limit: int, chunk: int = 16) -> Optional[TtTensor]:
    """Accumulate-and-round conversion at rounding accuracy; None once a TT rank exceeds ``rank_limit``."""
    policy = TruncationPolicy(0.0)
    acc = None
    for s in range(0, w.rank, chunk):
        part = CpTensor._wrap(w.shape, [f[:, s : s + chunk] for f in w.factors])
        t = _tt_from_cp_exact(part)
        acc = t if acc is None else tt_add(acc, t)
        acc, _ = tt_round(acc, policy)
        if acc.rank > rank_limit:
            return None
    return acc if acc is not None else TtTensor.zero(w.shape)


def _tt_from_cp_exact(w: CpTensor) -> TtTensor:
    d, r = w.shape.d, w.rank
    if d == 1:
        return TtTensor._wrap(w.shape, [w.factors[0].sum(axis=1).reshape(1, -1, 1)])
    cores = []
    diag = np.arange(r)
    for k, f in enumerate(w.factors):
        m = f.shape[0]
        if k == 0:
            cores.append(f.reshape(1, m, r))
        elif k == d - 1:
            cores.append(f.T.reshape(r, m, 1))
        else:
            c = np.zeros((r, m, r))
            c[diag, :, diag] = f.T
            cores.append(c)
    return TtTensor._wrap(w.shape, cores)


def tt_to_cp(w: TtTensor) -> CpTensor:
    """Exact CP form with one term per path through the rank indices (small ranks only)."""
    ranks = w.tt_ranks
    paths = np.zeros((1, 0), dtype=int)
    for r in ranks[1:-1]:
        # row-major enumeration: the last rank index varies fastest
        paths = np.hstack([np.repeat(paths, r, axis=0), np.tile(np.arange(r), len(paths))[:, None]])
    factors = []
    for k, c in enumerate(w.cores):
        a = paths[:, k - 1] if k > 0 else np.zeros(len(paths), dtype=int)
        b = paths[:, k] if k < w.shape.d - 1 else np.zeros(len(paths), dtype=int)
        factors.append(c[a, :, b].T)
    return CpTensor(w.shape, factors)
