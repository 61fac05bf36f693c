"""Post-processing tasks expressed through Hadamard-algebra operations.

Every function here works on any :class:`~hadalg.core.AlgebraElement`
backend.  Nonlinear maps (inverse, sign, square root) are computed with the
truncated fixed-point driver, and extreme entries are found with power-type
iterations whose iterates concentrate on the wanted position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import (
    AlgebraElement,
    DegenerateIterateError,
    DivergenceError,
    HadalgError,
    IterationReport,
    MultiIndex,
    StoppingRule,
    TruncationInfo,
    TruncationPolicy,
    state_functional,
    truncated_fixed_point,
)
from .cp import CpTensor
from .dense import DenseTensor
from .tt import tt_from_cp

_U = np.finfo(float).eps


class EmptyLevelSetError(HadalgError, ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    """Open interval ``]lower, upper[``; ``None`` or infinities for half-lines."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        lo = -math.inf if self.lower is None else float(self.lower)
        hi = math.inf if self.upper is None else float(self.upper)
        if math.isnan(lo) or math.isnan(hi) or not lo < hi:
            raise ValueError(f"empty interval ]{lo}, {hi}[")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def is_full(self) -> bool:
        return math.isinf(self.lower) and math.isinf(self.upper)

    def complement_parts(self):
        """Intervals covering the complement up to the (measure-zero) end points."""
        parts = []
        if not math.isinf(self.lower):
            parts.append(Interval(-math.inf, self.lower))
        if not math.isinf(self.upper):
            parts.append(Interval(self.upper, math.inf))
        return parts

    def __iter__(self):
        return iter((self.lower, self.upper))


def as_interval(S) -> Interval:
    return S if isinstance(S, Interval) else Interval(*S)


@dataclass
class ExtremeResult:
    """Outcome of an extreme-entry search.

    ``value`` is the entry of the input at ``index`` (read back exactly);
    ``rq_value`` is the Rayleigh-quotient estimate it is checked against and
    ``error_bound`` the Krylov-Bogolyubov radius around ``rq_value``.
    """

    value: float
    index: MultiIndex
    error_bound: float
    report: IterationReport
    eigenvector: AlgebraElement
    rq_value: float
    flags: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.report.converged

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "index": [i + 1 for i in self.index],
            "rq_value": self.rq_value,
            "error_bound": self.error_bound,
            "converged": self.converged,
            "iterations": self.report.iterations,
            "max_rank": self.report.max_rank,
            "flags": dict(self.flags),
        }


# --------------------------------------------------------------------------
# helpers


def _defaults(policy, stop, kind="relative-step", eta=1e-10, max_iters=100):
    policy = policy or TruncationPolicy()
    if stop is None:
        if kind == "residual":
            # quadratically convergent maps stagnate near eps; ask for no less
            eta = max(eta, 10.0 * policy.epsilon)
        stop = StoppingRule(kind=kind, eta=eta, max_iters=max_iters)
    return policy, stop


def _compress(x: AlgebraElement, policy: TruncationPolicy, trigger: int):
    """Truncate an intermediate result when its rank exceeds ``trigger``."""
    if x.rank <= trigger:
        return x
    return x.truncate(policy)[0]


def _trigger(policy: TruncationPolicy, w: AlgebraElement) -> int:
    return policy.trigger_rank or max(1, 2 * w.rank)


def estimate_inf_norm(w: AlgebraElement, iters: int = 8, policy: Optional[TruncationPolicy] = None) -> float:
    """Estimate ``max |w_m|``.

    Exact for dense tensors.  Otherwise a short exponentiated power run is
    used: after ``i`` squarings ``sqrt(rho_2)`` is a weighted mean of ``|w_m|``
    with weights ``w_m**(2**(i+1))`` and increases towards the maximum.  CP
    input is converted to TT for this run because SVD rounding keeps the
    squared iterates compact where ALS may not.  Should the run break down,
    ``||w||`` (an upper bound) is returned.
    """
    if isinstance(w, DenseTensor):
        return float(np.max(np.abs(w.values)))
    nrm = w.norm()
    if nrm == 0.0:
        return 0.0
    base = policy or TruncationPolicy()
    policy = TruncationPolicy(max(base.epsilon, 1e-6), base.max_rank)
    x = w
    if isinstance(w, CpTensor):
        x = tt_from_cp(w, policy)
    trigger = 1
    try:
        y = _compress(x.square(), policy, trigger)
        v = x.scale(1.0 / nrm)
        best = 0.0
        for _ in range(iters):
            v2, _, rho2, _ = exp_power_step(x, y, v)
            best = max(best, math.sqrt(max(rho2, 0.0)))
            v = _compress(v2, policy, trigger)
    except DegenerateIterateError:
        return nrm
    return min(best, nrm) if best > 0 else nrm


# --------------------------------------------------------------------------
# inverse, sign, square root


def inverse_residual(w: AlgebraElement, v: AlgebraElement) -> float:
    """Relative residual ``||1 - w (.) v|| / ||1||``."""
    one = w.same_kind_unit()
    return one.dist(w.hadamard(v)) / math.sqrt(float(w.shape.size))


def hadamard_inverse(
    w: AlgebraElement,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    v0: Optional[AlgebraElement] = None,
) -> Tuple[AlgebraElement, IterationReport]:
    """Entrywise reciprocal by the Newton map ``v <- v (.) (2 - w (.) v)``.

    The residual ``e = 1 - w (.) v`` squares in every step.  The default start
    ``w / s**2`` with ``s`` an overestimate of ``max |w_m|`` puts every
    ``w_m v_m`` into ``(0, 1]``, inside the basin ``(0, 2)``.
    """
    policy, stop = _defaults(policy, stop, kind="residual", eta=1e-12)
    if v0 is None:
        s = 1.05 * estimate_inf_norm(w, policy=policy)
        if s == 0.0:
            raise DivergenceError("cannot invert the zero tensor", IterationReport())
        v0 = w.scale(1.0 / s**2)
    one = w.same_kind_unit()

    # the product is formed exactly and truncated once by the driver; a
    # second truncation inside the map would feed its remainder back
    def phi(v):
        return v.hadamard(one.scale(2.0) - w.hadamard(v))

    v, report = truncated_fixed_point(phi, v0, policy, stop, residual=lambda z: inverse_residual(w, z))
    return v, report


def sign_residual(v: AlgebraElement, w_scaled: AlgebraElement) -> float:
    """``||1 - v (.) v|| / ||w_scaled||``.

    On dense input the norm is restricted to the nonzero support of
    ``w_scaled``, where the sign is +-1; compressed input is assumed to have
    no exact zeros.
    """
    denom = w_scaled.norm()
    if isinstance(v, DenseTensor):
        mask = w_scaled.values != 0
        r = (1.0 - v.values**2)[mask]
        return float(np.linalg.norm(r)) / denom
    return w_scaled.same_kind_unit().dist(v.square()) / denom


def hadamard_sign(
    w: AlgebraElement,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    mode: str = "newton-schulz",
    scale: Optional[float] = None,
) -> Tuple[AlgebraElement, IterationReport]:
    """Entrywise sign of ``w``.

    ``newton-schulz`` (default) iterates ``v <- v (.) (3 - v (.) v) / 2`` on
    ``w / s`` with ``s = 1.1 * estimate_inf_norm(w)``; that map converges for
    entries of modulus below ``sqrt(3)``.  ``roberts-newton`` iterates
    ``v <- (v + v^(-1)) / 2`` with an inner Hadamard inverse per step and is
    kept as a reference.  Zero entries stay zero.  The report's
    ``extras["scale"]`` holds ``s``; residuals are :func:`sign_residual`.
    """
    if mode not in ("newton-schulz", "roberts-newton"):
        raise ValueError(f"unknown sign mode {mode!r}")
    policy, stop = _defaults(policy, stop, kind="residual", eta=1e-8)
    if scale is None:
        scale = 1.1 * estimate_inf_norm(w, policy=policy)
    if not scale > 0:
        z = w.scale(0.0)
        return z, IterationReport(converged=True, final_residual=0.0, extras={"scale": scale})
    ws = w.scale(1.0 / scale)
    one = w.same_kind_unit()
    inner_stop = StoppingRule(kind="residual", eta=max(stop.eta * 1e-2, 1e-14), max_iters=stop.max_iters)

    if mode == "newton-schulz":

        def phi(v):
            return v.hadamard(one.scale(3.0) - v.square()).scale(0.5)

    else:

        def phi(v):
            vinv, rep = hadamard_inverse(v, policy, inner_stop)
            return (v + vinv).scale(0.5), {"inner_iterations": rep.iterations}

    v, report = truncated_fixed_point(
        phi, ws, policy, stop, residual=lambda z: sign_residual(z, ws)
    )
    report.extras["scale"] = scale
    return v, report


def hadamard_sqrt(
    w: AlgebraElement,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
) -> Tuple[AlgebraElement, IterationReport]:
    """Entrywise square root by the Babylonian map ``v <- (v + v^(-1) (.) w) / 2``.

    Starts from ``sqrt(s) * 1`` with ``s`` an estimate of ``max w_m``; entries
    must be positive.  Residual: ``||v (.) v - w|| / ||w||``.
    """
    policy, stop = _defaults(policy, stop, kind="residual", eta=1e-12)
    s = estimate_inf_norm(w, policy=policy)
    if not s > 0:
        raise DivergenceError("square root needs positive entries", IterationReport())
    one = w.same_kind_unit()
    v0 = one.scale(math.sqrt(s))
    wn = w.norm()
    inner_stop = StoppingRule(kind="residual", eta=max(stop.eta * 1e-2, 1e-14), max_iters=stop.max_iters)
    state = {"inv": None}

    def phi(v):
        # warm start the inner inverse from the previous one: v changes little
        # near convergence, and 1/v stays inside the Newton basin
        vinv, rep = hadamard_inverse(v, policy, inner_stop, v0=state["inv"])
        if not rep.converged:
            vinv, rep = hadamard_inverse(v, policy, inner_stop)
        state["inv"] = vinv
        nxt = (v + vinv.hadamard(w)).scale(0.5)
        return nxt, {"inner_iterations": rep.iterations}

    v, report = truncated_fixed_point(
        phi, v0, policy, stop, residual=lambda z: z.square().dist(w) / wn
    )
    return v, report


# --------------------------------------------------------------------------
# level sets and statistics


def characteristic(
    w: AlgebraElement,
    S,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    mode: str = "newton-schulz",
) -> Tuple[AlgebraElement, list]:
    """Indicator ``chi_S(w)`` of the open interval ``S``.

    Half-lines use ``(1 + sign(b - w)) / 2`` or ``(1 + sign(w - a)) / 2``; a
    bounded interval uses ``(sign(b - w) - sign(a - w)) / 2``.  Entries equal
    to an end point get 1/2.  Returns the indicator and the sign reports.
    """
    S = as_interval(S)
    policy = policy or TruncationPolicy()
    one = w.same_kind_unit()
    if S.is_full:
        return one, []
    reports = []
    if math.isinf(S.lower):
        sg, rep = hadamard_sign(one.scale(S.upper) - w, policy, stop, mode)
        reports.append(rep)
        chi = (one + sg).scale(0.5)
    elif math.isinf(S.upper):
        sg, rep = hadamard_sign(w - one.scale(S.lower), policy, stop, mode)
        reports.append(rep)
        chi = (one + sg).scale(0.5)
    else:
        s_hi, rep_hi = hadamard_sign(one.scale(S.upper) - w, policy, stop, mode)
        s_lo, rep_lo = hadamard_sign(one.scale(S.lower) - w, policy, stop, mode)
        reports += [rep_hi, rep_lo]
        chi = (s_hi - s_lo).scale(0.5)
    if chi.rank > _trigger(policy, w):
        chi, _ = chi.truncate(policy)
    return chi, reports


def level_set(
    w: AlgebraElement,
    S,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    chi: Optional[AlgebraElement] = None,
) -> AlgebraElement:
    """``L_S(w) = chi_S(w) (.) w``: values inside ``S`` kept in place, zero elsewhere."""
    policy = policy or TruncationPolicy()
    if chi is None:
        chi, _ = characteristic(w, S, policy, stop)
    out = chi.hadamard(w)
    if out.rank > _trigger(policy, w):
        out, _ = out.truncate(policy)
    return out


def support_cardinality(chi: AlgebraElement) -> Tuple[int, float]:
    """``(rounded, raw)`` where ``raw = <chi, 1>``; halves round down."""
    raw = state_functional(chi)
    return int(math.ceil(raw - 0.5)), raw


def probability(
    w: AlgebraElement,
    S,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    chi: Optional[AlgebraElement] = None,
) -> float:
    """Fraction of entries inside ``S``: ``<chi_S(w), 1> / N``.

    The division by ``N`` is folded into a rank-one weight tensor with entries
    ``1/N`` so that nothing overflows for ``N`` near the float range.
    """
    S = as_interval(S)
    if S.is_full:
        return 1.0
    if chi is None:
        chi, _ = characteristic(w, S, policy, stop)
    return chi.inner(w.uniform_weights())


def mean_variance(w: AlgebraElement) -> Tuple[float, float]:
    """Mean ``<w, 1>/N`` and variance ``<w~, w~>/N`` with ``w~ = w - mean 1``."""
    mean = w.inner(w.uniform_weights())
    root = w.uniform_weights(0.5)
    centred = w - w.same_kind_unit().scale(mean)
    var = centred.hadamard(root).norm() ** 2
    return mean, var


def centred(w: AlgebraElement) -> AlgebraElement:
    """``w - mean(w) 1`` (one extra term before truncation)."""
    mean = w.inner(w.uniform_weights())
    return w - w.same_kind_unit().scale(mean)


def _log_size(w: AlgebraElement) -> float:
    return sum(math.log(m) for m in w.shape)


def conditional_mean(
    w: AlgebraElement,
    S,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    chi: Optional[AlgebraElement] = None,
) -> float:
    """Mean of the entries inside ``S``: ``<L_S(w), 1> / <chi_S(w), 1>``."""
    S = as_interval(S)
    if chi is None:
        chi, _ = characteristic(w, S, policy, stop)
    weights = w.uniform_weights()
    p = chi.inner(weights)
    # at least one member means <chi, 1> = p N > 1/2
    if not p > 0.0 or math.log(p) + _log_size(w) <= math.log(0.5):
        raise EmptyLevelSetError(f"no entries inside ]{S.lower}, {S.upper}[")
    lset = level_set(w, S, policy, stop, chi=chi)
    return lset.inner(weights) / p


# --------------------------------------------------------------------------
# power iterations


def power_step(w: AlgebraElement, v: AlgebraElement) -> Tuple[AlgebraElement, float]:
    """One power step: ``u = w (.) v``, ``gamma = ||u||**-1``, returns ``(gamma u, gamma)``.

    The sign of the output is chosen so that ``<u, v> >= 0``; without this the
    iterates flip sign every step when the dominant entry is negative.
    """
    u = w.hadamard(v)
    nrm = u.norm()
    if nrm == 0.0:
        raise DegenerateIterateError("power step breakdown: w (.) v = 0")
    gamma = 1.0 / nrm
    if u.inner(v) < 0:
        return u.scale(-gamma), gamma
    return u.scale(gamma), gamma


def _kb(rho1: float, rho2: float) -> float:
    return math.sqrt(max(rho2 - rho1 * rho1, 0.0))


def power_rq_step(w: AlgebraElement, v: AlgebraElement) -> Tuple[AlgebraElement, float, float, float]:
    """Power step with Rayleigh quotient ``rho1 = <w v, v>`` and ``rho2 = <w v, w v>``.

    Both are divided by ``<v, v>`` so slightly denormalised iterates (after
    truncation) are handled.  ``eps_lambda = sqrt(max(rho2 - rho1**2, 0))``.
    """
    u = w.hadamard(v)
    vv = v.inner(v)
    if vv == 0.0:
        raise DegenerateIterateError("zero iterate")
    rho1 = u.inner(v) / vv
    rho2 = u.inner(u) / vv
    if not rho2 > 0.0:
        raise DegenerateIterateError("power step breakdown: rho2 <= 0")
    out = u.scale((1.0 if rho1 >= 0 else -1.0) / math.sqrt(rho2 * vv))
    return out, rho1, rho2, _kb(rho1, rho2)


def exp_power_step(w: AlgebraElement, y: AlgebraElement, v: AlgebraElement) -> Tuple[AlgebraElement, float, float, float]:
    """Exponentiated power step with ``y = w (.) w`` precomputed.

    ``u = v (.) v``; ``rho1 = <w, u>``; ``rho2 = <y, u>`` (both over
    ``<v, v>``); the next iterate is ``u / ||u||``.  From ``v0 = w/||w||`` the
    iterates are proportional to ``w**(2**i)``.
    """
    u = v.square()
    vv = v.inner(v)
    if vv == 0.0:
        raise DegenerateIterateError("zero iterate")
    rho1 = w.inner(u) / vv
    rho2 = y.inner(u) / vv
    un = u.norm()
    if un == 0.0:
        raise DegenerateIterateError("exp-power breakdown: v (.) v = 0")
    return u.scale(1.0 / un), rho1, rho2, _kb(rho1, rho2)


def rayleigh(w: AlgebraElement, v: AlgebraElement) -> Tuple[float, float, float]:
    """``(rho1, rho2, eps_lambda)`` for the iterate ``v``."""
    u = w.hadamard(v)
    vv = v.inner(v)
    rho1 = u.inner(v) / vv
    rho2 = u.inner(u) / vv
    return rho1, rho2, _kb(rho1, rho2)


def kb_bound(w: AlgebraElement, v: AlgebraElement) -> Tuple[float, float, Optional[bool]]:
    """Krylov-Bogolyubov data ``(rho1, eps_lambda, holds)``.

    ``holds`` compares against the exact spectrum when ``w`` is dense (else
    ``None``): some entry ``w_m`` satisfies ``|w_m - rho1| <= eps_lambda``.
    """
    rho1, _, eps = rayleigh(w, v)
    holds = None
    if isinstance(w, DenseTensor):
        gap = float(np.min(np.abs(w.flat - rho1)))
        slack = 8 * _U * float(np.max(np.abs(w.flat)))
        holds = bool(gap <= eps + slack)
    return rho1, eps, holds


METHODS = ("power", "power-rq", "exp-power")


def _deflated_start(w: AlgebraElement, method: str, deflate: Sequence[MultiIndex]) -> AlgebraElement:
    if method == "exp-power":
        v = w
        for m in deflate:
            v = v - v.basis(m).scale(w.entry(m))
    else:
        v = w.same_kind_unit()
        for m in deflate:
            v = v - v.basis(m)
    nrm = v.norm()
    if nrm == 0.0:
        raise DegenerateIterateError("starting vector vanishes after deflation")
    return v.scale(1.0 / nrm)


def modulus_max(
    w: AlgebraElement,
    method: str = "exp-power",
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    deflate: Sequence[MultiIndex] = (),
    v0: Optional[AlgebraElement] = None,
):
    """Iterate towards the entry of largest modulus.

    Returns ``(v, rho1, eps_lambda, report)`` where ``v`` is the final
    iterate and ``rho1`` its Rayleigh quotient (signed).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    policy, stop = _defaults(policy, stop)
    if v0 is None:
        v0 = _deflated_start(w, method, deflate)
    if method == "exp-power":
        y = w.square()
        if y.rank > _trigger(policy, w):
            y, _ = y.truncate(policy)

        def phi(v):
            nxt, r1, r2, e = exp_power_step(w, y, v)
            return nxt, {"rho1": r1, "rho2": r2, "eps_lambda": e}

    elif method == "power-rq":

        def phi(v):
            nxt, r1, r2, e = power_rq_step(w, v)
            return nxt, {"rho1": r1, "rho2": r2, "eps_lambda": e}

    else:

        def phi(v):
            nxt, g = power_step(w, v)
            return nxt, {"gamma": g, "lambda_estimate": 1.0 / g}

    v, report = truncated_fixed_point(phi, v0, policy, stop)
    rho1, rho2, eps = rayleigh(w, v)
    report.extras.update({"rho1": rho1, "rho2": rho2, "eps_lambda": eps})
    return v, rho1, eps, report


def find_extreme(
    w: AlgebraElement,
    which: str = "max",
    method: str = "exp-power",
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    deflate: Sequence[MultiIndex] = (),
) -> ExtremeResult:
    """Largest (``max``) or smallest (``min``) entry of ``w``.

    A modulus-maximum run is done first; when its Rayleigh quotient is
    negative the largest-modulus entry is a minimum, so the run is repeated on
    ``w + beta 1`` with ``beta = -rho1`` and the shift removed afterwards.
    ``min`` is the ``max`` of ``-w``.  Entries listed in ``deflate`` are
    zeroed in the starting vector.
    """
    if which not in ("max", "min"):
        raise ValueError("which must be 'max' or 'min'")
    if w.norm() == 0.0:
        raise DegenerateIterateError("extreme entries of the zero tensor are not separated")
    policy, stop = _defaults(policy, stop)
    sign = 1.0 if which == "max" else -1.0
    x = w if sign > 0 else w.scale(-1.0)
    v, rho1, eps, report = modulus_max(x, method, policy, stop, deflate)
    shift = 0.0
    if rho1 < 0:
        shift = -rho1
        xs = x + x.same_kind_unit().scale(shift)
        if xs.rank > _trigger(policy, w):
            xs, _ = xs.truncate(policy)
        first = report
        v, rho1s, eps, report = modulus_max(xs, method, policy, stop, deflate)
        report.extras["shift"] = shift
        report.extras["unshifted_iterations"] = first.iterations
        rho1 = rho1s - shift
    index = v.peak_index()
    value = w.entry(index)
    rq = sign * rho1
    flags = {"shift": shift}
    tol = max(eps, 1e-8 * max(abs(value), abs(rq), 1e-300))
    if abs(value - rq) > tol:
        flags["index_mismatch"] = True
    return ExtremeResult(value, index, eps, report, v, rq, flags)


def closest_to(
    w: AlgebraElement,
    rho: float,
    policy: Optional[TruncationPolicy] = None,
    stop: Optional[StoppingRule] = None,
    method: str = "exp-power",
) -> ExtremeResult:
    """Entry of ``w`` nearest to ``rho``.

    The modulus-maximum of ``y = (w - rho 1)^(-1)`` sits where ``|w_m - rho|``
    is smallest.  If the inverse does not converge (an entry equals ``rho`` or
    nearly so) the minimum of ``(w - rho 1)**2`` is searched instead and the
    result carries ``flags["exact_hit"]``.
    """
    policy, stop = _defaults(policy, stop)
    x = w - w.same_kind_unit().scale(float(rho))
    if x.rank > _trigger(policy, w):
        x, _ = x.truncate(policy)
    flags = {}
    y = None
    try:
        y, inv_rep = hadamard_inverse(x, policy)
        if not inv_rep.converged:
            y = None
    except (DivergenceError, DegenerateIterateError):
        y = None
    if y is not None:
        v, r1, eps, report = modulus_max(y, method, policy, stop)
        index = v.peak_index()
        rq = rho + 1.0 / r1 if r1 != 0 else rho
        err = eps / (r1 * r1) if r1 != 0 else math.inf
    else:
        flags["exact_hit"] = True
        res = find_extreme(x.square(), "min", method, policy, stop)
        index, report, v = res.index, res.report, res.eigenvector
        rq = rho
        err = res.error_bound
    value = w.entry(index)
    return ExtremeResult(value, index, err, report, v, rq, flags)
