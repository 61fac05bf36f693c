"""Canonical polyadic (CP) backend with ALS rank truncation."""
from __future__ import annotations

import math
import warnings
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

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
from .dense import DenseTensor, check_dense_cap

_U = np.finfo(float).eps

# Above this many flops the accurate (orthogonalisation based) norm of a
# difference falls back to the Gram formula.
ACCURATE_DIST_BUDGET = 2e8


class CpTensor(AlgebraElement):
    """Sum of ``rank`` elementary tensors.

    ``factors[nu]`` is an ``M_nu x rank`` matrix whose column ``i`` is the mode-nu
    vector of term ``i``.  Rank 0 is the zero tensor.
    """

    def __init__(self, shape, factors: Sequence[np.ndarray]):
        shape = as_shape(shape)
        if len(factors) != shape.d:
            raise ValueError(f"expected {shape.d} factor matrices, got {len(factors)}")
        mats = []
        r = None
        for m, f in zip(shape, factors):
            a = np.array(f, dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            if a.shape[0] != m:
                raise ValueError(f"factor has {a.shape[0]} rows, mode size is {m}")
            if r is None:
                r = a.shape[1]
            elif a.shape[1] != r:
                raise ValueError("all factor matrices must have the same number of columns")
            a.setflags(write=False)
            mats.append(a)
        self.shape = shape
        self.factors = tuple(mats)

    @classmethod
    def _wrap(cls, shape, factors):
        obj = cls.__new__(cls)
        obj.shape = shape
        mats = []
        for f in factors:
            f = np.ascontiguousarray(f, dtype=float)
            f.setflags(write=False)
            mats.append(f)
        obj.factors = tuple(mats)
        return obj

    def __repr__(self):
        return f"CpTensor(shape={self.shape.mode_sizes}, rank={self.rank})"

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    def add(self, other):
        return cp_add(self, other)

    def scale(self, alpha):
        return cp_scale(alpha, self)

    def hadamard(self, other):
        return cp_hadamard(self, other)

    def inner(self, other):
        return cp_inner(self, other)

    def entry(self, index):
        return cp_entry(self, index)

    def truncate(self, policy):
        return cp_truncate_als(self, policy)

    def square(self):
        return cp_square(self)

    def norm(self):
        return _accurate_norm(self)

    def dist(self, other):
        self._check_same_shape(other)
        diff = cp_add(self, cp_scale(-1.0, other))
        return _accurate_norm(diff)

    @classmethod
    def unit(cls, shape):
        return cp_unit(shape)

    @classmethod
    def zero(cls, shape):
        shape = as_shape(shape)
        return cls._wrap(shape, [np.zeros((m, 0)) for m in shape])

    @classmethod
    def elementary(cls, shape, factors):
        shape = as_shape(shape)
        return cls(shape, [np.asarray(f, dtype=float).reshape(-1, 1) for f in factors])

    def to_dense(self):
        return cp_to_dense(self)

    def term_norms(self) -> np.ndarray:
        out = np.ones(self.rank)
        for f in self.factors:
            out = out * np.linalg.norm(f, axis=0)
        return out

    def peak_index(self, rel_tol: float = 0.5) -> MultiIndex:
        if self.rank == 0:
            return (0,) * self.shape.d
        v = _balanced(self)
        grams = [f.T @ f for f in v.factors]
        suffix = [None] * (self.shape.d + 1)
        suffix[-1] = np.ones((v.rank, v.rank))
        for k in range(self.shape.d - 1, -1, -1):
            suffix[k] = suffix[k + 1] * grams[k]
        prefix_weights = [np.ones(v.rank)]

        def slice_sq(prefix):
            k = len(prefix)
            if k:
                prefix_weights.append(prefix_weights[-1] * v.factors[k - 1][prefix[-1]])
            q = prefix_weights[-1][None, :] * v.factors[k]
            return np.einsum("mi,ij,mj->m", q, suffix[k + 1], q)

        return sequential_peak(self.shape, slice_sq, rel_tol)


def _check_pair(u: CpTensor, v: CpTensor):
    if u.shape != v.shape:
        raise ShapeMismatchError(f"shape mismatch: {u.shape.mode_sizes} vs {v.shape.mode_sizes}")


def cp_scale(alpha: float, w: CpTensor) -> CpTensor:
    """Multiply by ``alpha``, spreading ``|alpha|**(1/d)`` over all modes.

    The sign goes to the first mode only.
    """
    alpha = float(alpha)
    d = w.shape.d
    mag = abs(alpha) ** (1.0 / d)
    factors = [f * mag for f in w.factors]
    if alpha < 0:
        factors[0] = -factors[0]
    return CpTensor._wrap(w.shape, factors)


def cp_add(u: CpTensor, v: CpTensor) -> CpTensor:
    _check_pair(u, v)
    return CpTensor._wrap(u.shape, [np.hstack([a, b]) for a, b in zip(u.factors, v.factors)])


def cp_hadamard(u: CpTensor, v: CpTensor) -> CpTensor:
    """Entrywise product; term ``(j, k)`` lands at column ``j * r_v + k``."""
    _check_pair(u, v)
    ru, rv = u.rank, v.rank
    factors = [(a[:, :, None] * b[:, None, :]).reshape(a.shape[0], ru * rv) for a, b in zip(u.factors, v.factors)]
    return CpTensor._wrap(u.shape, _rebalance(factors))


def _rebalance(factors):
    """Equalise the mode norms of every term; terms with a zero vector are left alone."""
    if factors[0].shape[1] == 0:
        return factors
    norms = np.array([np.linalg.norm(f, axis=0) for f in factors])
    ok = np.all(norms > 0, axis=0) & np.all(np.isfinite(norms), axis=0)
    if not np.any(ok):
        return factors
    logs = np.log(np.where(ok, norms, 1.0))
    scale = np.exp(logs.mean(axis=0) - logs)
    scale[:, ~ok] = 1.0
    return [f * sc for f, sc in zip(factors, scale)]


def cp_square(w: CpTensor) -> CpTensor:
    """``w (.) w`` using only the ``r(r+1)/2`` distinct pairwise terms."""
    r = w.rank
    j, k = np.triu_indices(r)
    factors = [f[:, j] * f[:, k] for f in w.factors]
    off = j != k
    if np.any(off):
        factors[0] = factors[0].copy()
        factors[0][:, off] *= 2.0
    return CpTensor._wrap(w.shape, _rebalance(factors))


def _gram_product(u: CpTensor, v: CpTensor) -> np.ndarray:
    g = np.ones((u.rank, v.rank))
    for a, b in zip(u.factors, v.factors):
        g *= a.T @ b
    return g


def cp_inner(u: CpTensor, v: CpTensor) -> float:
    _check_pair(u, v)
    if u.rank == 0 or v.rank == 0:
        return 0.0
    if u.rank * v.rank > 4_000_000:
        total = 0.0
        step = max(1, 4_000_000 // v.rank)
        for s in range(0, u.rank, step):
            part = CpTensor._wrap(u.shape, [a[:, s : s + step] for a in u.factors])
            total += float(_gram_product(part, v).sum())
        return total
    return float(_gram_product(u, v).sum())


def _accurate_norm(w: CpTensor) -> float:
    """Norm through TT orthogonalisation when affordable, else the Gram formula.

    The Gram sum loses about half the digits when terms cancel; the QR route
    keeps the error at the level of the unit roundoff times the term sizes.
    """
    if w.rank == 0:
        return 0.0
    t = _tt_image(w)
    if t is not None:
        return t.norm()
    return math.sqrt(max(cp_inner(w, w), 0.0))


def _tt_image(w: CpTensor):
    """TT copy of ``w`` accurate to rounding, or None when its TT ranks are too large."""
    from .tt import tt_from_cp, tt_from_cp_bounded

    if _affordable(w.shape, w.rank):
        return tt_from_cp(w)
    return tt_from_cp_bounded(w, TT_IMAGE_RANK_LIMIT)


# TT ranks above this make the accurate route more expensive than it is worth
TT_IMAGE_RANK_LIMIT = 64


def _affordable(shape, r) -> bool:
    return sum(m for m in shape) * float(r) ** 3 <= ACCURATE_DIST_BUDGET


def cp_entry(w: CpTensor, index) -> float:
    idx = w.shape.check_index(index)
    if w.rank == 0:
        return 0.0
    p = w.factors[0][idx[0]].copy()
    for f, i in zip(w.factors[1:], idx[1:]):
        p *= f[i]
    return float(np.sum(p))


def cp_unit(shape) -> CpTensor:
    shape = as_shape(shape)
    return CpTensor._wrap(shape, [np.ones((m, 1)) for m in shape])


def cp_to_dense(w: CpTensor) -> DenseTensor:
    check_dense_cap(w.shape)
    if w.rank == 0:
        return DenseTensor.zero(w.shape)
    p = w.factors[0]
    for f in w.factors[1:]:
        p = (p[:, None, :] * f[None, :, :]).reshape(-1, w.rank)
    return DenseTensor._wrap(w.shape, p.sum(axis=1).reshape(w.shape.mode_sizes))


def dense_to_cp_exact(w: DenseTensor) -> CpTensor:
    """Spectral-resolution conversion: one elementary term per nonzero entry."""
    flat = w.flat
    nz = np.flatnonzero(flat)
    idx = np.unravel_index(nz, w.shape.mode_sizes)
    factors = []
    for mode, m in enumerate(w.shape):
        f = np.zeros((m, nz.size))
        f[idx[mode], np.arange(nz.size)] = 1.0
        factors.append(f)
    if nz.size:
        factors[0][idx[0], np.arange(nz.size)] = flat[nz]
    return CpTensor._wrap(w.shape, factors)


def _balanced(w: CpTensor) -> CpTensor:
    """Equalise factor norms within each term and drop vanishing terms."""
    if w.rank == 0:
        return w
    norms = np.array([np.linalg.norm(f, axis=0) for f in w.factors])  # d x r
    keep = np.all(norms > 0, axis=0)
    if not np.any(keep):
        return CpTensor.zero(w.shape)
    norms = norms[:, keep]
    logs = np.log(norms)
    target = logs.mean(axis=0)
    factors = [f[:, keep] * np.exp(target - lg) for f, lg in zip(w.factors, logs)]
    return CpTensor._wrap(w.shape, factors)


def _unit_terms(w: CpTensor):
    """Unit mode vectors (sign-normalised) and the term coefficients."""
    r = w.rank
    coef = np.ones(r)
    units = []
    for f in w.factors:
        nrm = np.linalg.norm(f, axis=0)
        g = f / np.where(nrm > 0, nrm, 1.0)
        lead = g[np.argmax(np.abs(g) > 0, axis=0), np.arange(r)]
        sgn = np.where(lead < 0, -1.0, 1.0)
        units.append(g * sgn)
        coef = coef * nrm * sgn
    return units, coef


CANCEL_RATIO = 1e3
PATH_LIMIT = 4096
MERGE_BUDGET = 2e7


def _merge_parallel(w: CpTensor) -> CpTensor:
    """Exact simplifications before ALS.

    Terms whose mode vectors coincide up to scaling are added up (``u + u``),
    and terms that coincide in all modes but one are combined into a single
    term by adding their vectors in the remaining mode (``a x c + b x c``).
    """
    d = w.shape.d
    while w.rank >= 2 and w.rank * sum(w.shape) <= MERGE_BUDGET:
        r = w.rank
        units, coef = _unit_terms(w)
        ids = np.vstack([_vector_ids(u) for u in units])  # d x r
        merged = None
        for free in [None] + list(range(d)):
            fixed = [k for k in range(d) if k != free]
            if not fixed:
                continue
            _, first, inverse = np.unique(ids[fixed].T, axis=0, return_index=True, return_inverse=True)
            groups = first.size
            if groups == r:
                continue
            inverse = np.asarray(inverse).ravel()
            factors = [u[:, first].copy() for u in units]
            if free is None:
                c = np.zeros(groups)
                np.add.at(c, inverse, coef)
                factors[0] = factors[0] * c
            else:
                acc = np.zeros((w.shape[free], groups))
                np.add.at(acc.T, inverse, (units[free] * coef).T)
                factors[free] = acc
            merged = _balanced(CpTensor._wrap(w.shape, factors))
            break
        if merged is None:
            break
        w = merged
    return w


def _vector_ids(u: np.ndarray) -> np.ndarray:
    """Integer label per column; equal labels for columns equal after rounding."""
    # rounding absorbs last-bit differences between rescaled copies
    key = np.round(u, 13) + 0.0  # + 0.0 folds -0.0 into 0.0
    seen = {}
    return np.array([seen.setdefault(key[:, t].tobytes(), len(seen)) for t in range(u.shape[1])])


class _AlsProblem:
    """Precomputed data for fitting rank-r approximations of a fixed ``w``."""

    def __init__(self, w: CpTensor):
        self.w = w
        self.d = w.shape.d
        R = w.rank
        self.wnorm2, self.wabs = _gram_sums(w)
        # rounding bound for the Gram-formula residual (products of d factors,
        # sums over up to R**2 terms)
        self.noise_coef = 4.0 * (self.d + 2.0 * math.log2(max(R, 2)) + 4.0) * _U
        self.wt = _tt_image(w)
        if self.wt is not None:
            self.wnorm2 = self.wt.norm() ** 2
        # exact recompression is only decidable up to rounding of the terms;
        # for non-cancelling terms their norms add up to at most sqrt(R) ||w||
        self.value_floor = 32.0 * _U * math.sqrt(R * self.wnorm2)
        self.tol = 0.0

    def exact_residual(self, X) -> Optional[float]:
        """``||w - x||`` through the orthogonalisation route, or None if too costly."""
        if self.wt is None:
            return None
        from .tt import tt_add, tt_from_cp, tt_scale

        xt = tt_from_cp(CpTensor._wrap(self.w.shape, X))
        return tt_add(self.wt, tt_scale(-1.0, xt)).norm()

    def _sweep(self, X, A, B):
        """One ALS sweep, updating ``X`` and its Gram data in place."""
        W, d = self.w.factors, self.d
        for nu in range(d):
            H = np.ones_like(B[0])
            K = np.ones_like(A[0])
            for mu in range(d):
                if mu != nu:
                    H *= B[mu]
                    K *= A[mu]
            X[nu] = _spd_solve(K, W[nu] @ H)
            A[nu] = X[nu].T @ X[nu]
            B[nu] = W[nu].T @ X[nu]

    def polish(self, x_factors, res, max_sweeps, rel_gain=0.05):
        """Keep sweeping an accepted fit while the accurate residual still drops.

        A fit that only just meets the tolerance leaves an unstructured
        remainder of size ``eps ||w||``; inside an iteration that remainder is
        fed back and inflates later ranks.
        """
        if self.wt is None:
            return x_factors, res
        X = [np.array(f) for f in x_factors]
        A = [x.T @ x for x in X]
        B = [wf.T @ x for wf, x in zip(self.w.factors, X)]
        best = (list(X), res)
        for _ in range(max_sweeps):
            self._sweep(X, A, B)
            r = self.exact_residual(X)
            if not np.isfinite(r):
                break
            if r < best[1]:
                gain = 1.0 - r / best[1] if best[1] > 0 else 0.0
                best = (list(X), r)
                if gain < rel_gain:
                    break
            else:
                break
        return best

    def fit(self, x_factors, max_sweeps, target2, stall_tol):
        w, d = self.w, self.d
        W = w.factors
        X = [np.array(f) for f in x_factors]
        A = [x.T @ x for x in X]
        B = [wf.T @ x for wf, x in zip(W, X)]
        res2 = prev = math.inf
        ok = False
        sweeps = 0
        for sweeps in range(1, max_sweeps + 1):
            self._sweep(X, A, B)
            Kall = np.ones_like(A[0])
            Hall = np.ones_like(B[0])
            for mu in range(d):
                Kall *= A[mu]
                Hall *= B[mu]
            xnorm2 = float(Kall.sum())
            cross = float(Hall.sum())
            res2 = self.wnorm2 - 2.0 * cross + xnorm2
            floor = self.noise_coef * (self.wabs + 2.0 * float(np.abs(Hall).sum()) + float(np.abs(Kall).sum()))
            if not np.isfinite(res2):
                raise NumericalError("ALS produced non-finite factors")
            if res2 <= target2 + floor:
                # the Gram formula cannot see through cancelling terms, so
                # confirm with an accurate residual whenever affordable
                exact = self.exact_residual(X)
                if exact is None:
                    ok = True
                    break
                if exact <= self.tol:
                    res2 = exact * exact
                    ok = True
                    break
            if prev < math.inf:
                improvement = (math.sqrt(max(prev, 0.0)) - math.sqrt(max(res2, 0.0)))
                if improvement <= stall_tol * math.sqrt(max(prev, 0.0)):
                    break
            prev = res2
        return X, max(res2, 0.0), ok, sweeps


def _gram_sums(w: CpTensor) -> Tuple[float, float]:
    """``(||w||^2, sum |term products|)`` without holding an R x R block for large R."""
    R = w.rank
    step = max(1, min(R, 4_000_000 // max(R, 1)))
    total = 0.0
    absum = 0.0
    for s in range(0, R, step):
        g = np.ones((min(step, R - s), R))
        for f in w.factors:
            g *= f[:, s : s + step].T @ f
        total += float(g.sum())
        absum += float(np.abs(g).sum())
    return total, absum


def _path_form(v: CpTensor, prob: "_AlsProblem") -> Tuple[CpTensor, float]:
    """Swap ``v`` for the path expansion of its rounded TT image when that helps.

    The TT image rounded at machine precision has orthonormal cores, so its
    one-term-per-path CP form has no cancellation and often far fewer terms.
    It replaces ``v`` when it is shorter, or when the terms of ``v`` cancel
    heavily (ALS cannot fit such data to relative accuracy) and the path count
    stays moderate.  Returns the chosen form and its distance to ``v``.
    """
    from .tt import tt_round, tt_to_cp

    tw, info = tt_round(prob.wt, TruncationPolicy(0.0))
    paths = int(np.prod(tw.tt_ranks[1:-1], dtype=float))
    cancelling = float(v.term_norms().sum()) > CANCEL_RATIO * math.sqrt(prob.wnorm2)
    if paths < v.rank or (cancelling and paths <= PATH_LIMIT):
        return _merge_parallel(_balanced(tt_to_cp(tw))), info.error
    return v, 0.0


def _spd_solve(K, rhs):
    """Solve ``X K = rhs`` for symmetric positive semidefinite ``K``."""
    r = K.shape[0]
    ridge = 1e-15 * max(np.trace(K) / r, np.finfo(float).tiny)
    try:
        with warnings.catch_warnings():
            # near-singular normal equations are routine in ALS; the ridge keeps
            # the solve defined and the residual check judges the result
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            return scipy.linalg.solve(K + ridge * np.eye(r), rhs.T, assume_a="pos").T
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(K, rhs.T, rcond=None)[0].T


def cp_truncate_als(
    w: CpTensor,
    policy: TruncationPolicy,
    max_sweeps: int = 50,
    stall_tol: float = 1e-12,
    seed: int = 0,
) -> Tuple[CpTensor, TruncationInfo]:
    """Smallest-rank ALS approximation with ``||w - w*|| <= eps ||w||``.

    Ranks are searched by doubling and then bisection.  Each trial starts from
    the largest existing terms (by term norm) and falls back to seeded random
    factors once if that start stalls.  When no rank up to ``max_rank``
    reaches the tolerance, the best rank-``max_rank`` fit is returned with
    ``tolerance_miss`` set.

    Sweeps monitor the residual with the cheap Gram formula.  A fit is only
    accepted after the residual has been recomputed through TT
    orthogonalisation, which is immune to cancelling terms; for very large
    ranks where that is too costly the Gram value (accurate only to about
    ``sqrt(unit roundoff)`` relative) is trusted.
    """
    R0 = w.rank
    v = _merge_parallel(_balanced(w))
    R = v.rank
    if R == 0:
        return CpTensor.zero(w.shape), TruncationInfo(R0, 0, 0.0, False)
    prob = _AlsProblem(v)
    if prob.wnorm2 <= 0.0:
        return CpTensor.zero(w.shape), TruncationInfo(R0, 0, 0.0, False)
    base_err = 0.0
    if prob.wt is not None:
        v, base_err = _path_form(v, prob)
        if v.rank != R:
            R = v.rank
            prob = _AlsProblem(v)
    target2 = (policy.epsilon**2) * prob.wnorm2
    prob.tol = max(policy.epsilon * math.sqrt(prob.wnorm2), prob.value_floor)
    cap = policy.max_rank if policy.max_rank is not None else R
    term_order = np.argsort(-v.term_norms(), kind="stable")
    rng = np.random.default_rng(seed)
    cache = {}

    def attempt(r):
        if r in cache:
            return cache[r]
        if r >= R:
            cache[r] = (v.factors, 0.0, True)
            return cache[r]
        start = [f[:, term_order[:r]] for f in v.factors]
        X, res2, ok, _ = prob.fit(start, max_sweeps, target2, stall_tol)
        if not ok:
            scale = math.sqrt(prob.wnorm2) ** (1.0 / w.shape.d) / math.sqrt(r)
            rand = [rng.standard_normal((m, r)) * scale / math.sqrt(m) for m in w.shape]
            X2, res2b, ok2, _ = prob.fit(rand, max_sweeps, target2, stall_tol)
            if ok2 or res2b < res2:
                X, res2, ok = X2, res2b, ok2
        cache[r] = (X, res2, ok)
        return cache[r]

    hi_limit = min(cap, R)
    found = None
    last_fail = 0
    r = 1
    while True:
        r = min(r, hi_limit)
        _, _, ok = attempt(r)
        if ok:
            found = r
            break
        last_fail = r
        if r == hi_limit:
            break
        r *= 2
    if found is None:
        X, res2, _ = attempt(hi_limit)
        out = _balanced(CpTensor._wrap(w.shape, X))
        return out, TruncationInfo(R0, out.rank, math.sqrt(res2), True)
    lo, hi = last_fail, found
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if attempt(mid)[2]:
            hi = mid
        else:
            lo = mid
    X, res2, _ = attempt(hi)
    if hi >= R:
        return v, TruncationInfo(R0, v.rank, base_err, False)
    X, res = prob.polish(X, math.sqrt(res2), max_sweeps)
    out = CpTensor._wrap(w.shape, X)
    return out, TruncationInfo(R0, out.rank, res, False)
