import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hadalg.core import StoppingRule, TruncationPolicy
from hadalg.cp import CpTensor
from hadalg.dense import (
    DenseTensor,
    dense_argmax,
    dense_argmin,
    dense_closest,
    dense_level_count,
    dense_mean_var,
    dense_sign,
)
from hadalg.generators import poisson_rhs
from hadalg.postproc import (
    EmptyLevelSetError,
    Interval,
    characteristic,
    closest_to,
    conditional_mean,
    estimate_inf_norm,
    exp_power_step,
    find_extreme,
    hadamard_inverse,
    hadamard_sign,
    hadamard_sqrt,
    kb_bound,
    level_set,
    mean_variance,
    modulus_max,
    power_rq_step,
    power_step,
    probability,
    rayleigh,
    support_cardinality,
    truncated_fixed_point,
)
from hadalg.tt import TtTensor, tt_from_cp

from helpers import dense_values, random_cp, rel_err

BACKENDS = [DenseTensor, CpTensor, TtTensor]


def D(values):
    return DenseTensor((len(values),), np.array(values, dtype=float))


def as_backend(cls, dense: DenseTensor):
    """The dense tensor in the requested format (exact)."""
    if cls is DenseTensor:
        return dense
    from hadalg.cp import dense_to_cp_exact

    c = dense_to_cp_exact(dense)
    return c if cls is CpTensor else tt_from_cp(c, TruncationPolicy(0.0))


# -- interval ------------------------------------------------------------------


def test_interval_validation():
    assert Interval().is_full
    assert Interval(None, 1.0).lower == -math.inf
    with pytest.raises(ValueError):
        Interval(1.0, 1.0)
    assert [tuple(p) for p in Interval(0.0, 1.0).complement_parts()] == [(-math.inf, 0.0), (1.0, math.inf)]


# -- inverse -------------------------------------------------------------------


@pytest.mark.parametrize("cls", BACKENDS)
def test_inverse_of_unit(cls):
    u = cls.unit((2, 3))
    v, rep = hadamard_inverse(u)
    assert rep.converged
    np.testing.assert_allclose(dense_values(v), 1.0, atol=1e-12)


def test_inverse_recurrence_from_given_start():
    w = D([1.0, 2.0])
    v0 = D([0.25, 0.5])
    v, rep = hadamard_inverse(w, stop=StoppingRule(kind="residual", eta=1e-14), v0=v0)
    # first Newton step v (2 - w v): [0.25 * 1.75, 0.5 * 1.0]
    np.testing.assert_allclose(dense_values(v), [1.0, 0.5], rtol=1e-14)
    first = 0.25 * (2 - 0.25)
    assert rep.step_history[0].residual == pytest.approx(math.hypot(1 - first, 0.0) / math.sqrt(2))


@pytest.mark.parametrize("seed", range(4))
def test_double_inverse_returns_input(seed):
    rng = np.random.default_rng(seed)
    w = CpTensor((3, 3, 3), [rng.uniform(0.5, 1.5, (3, 2)) for _ in range(3)])
    t = tt_from_cp(w)
    pol = TruncationPolicy(1e-12)
    inv, r1 = hadamard_inverse(t, pol)
    back, r2 = hadamard_inverse(inv, pol)
    assert r1.converged and r2.converged
    assert rel_err(dense_values(back), dense_values(w)) <= 1e-8


# -- sign and square root -----------------------------------------------------------


@pytest.mark.parametrize("cls", BACKENDS)
def test_sign_of_positive_is_unit(cls):
    w = as_backend(cls, DenseTensor((2, 3), np.arange(1.0, 7.0)))
    v, rep = hadamard_sign(w, TruncationPolicy(1e-12))
    assert rep.converged
    np.testing.assert_allclose(dense_values(v), 1.0, atol=1e-6)


def test_sign_mixed_example():
    w = D([-2.0, 0.1, 3.0])
    v, rep = hadamard_sign(w)
    assert rep.converged
    np.testing.assert_allclose(v.values, dense_sign(w).values, atol=1e-6)


def test_sign_keeps_zeros():
    w = D([-1.0, 0.0, 2.0])
    v, rep = hadamard_sign(w)
    np.testing.assert_allclose(v.values, [-1, 0, 1], atol=1e-8)


def test_sign_scalar_recurrence():
    # with the scale fixed so that w / s = 0.5
    v, rep = hadamard_sign(D([1.0]), scale=2.0, stop=StoppingRule(kind="residual", eta=1e-14))
    assert v.values[0] == pytest.approx(1.0, abs=1e-14)
    first = rep.step_history[0].residual
    assert first == pytest.approx(abs(1 - 0.6875**2) / 0.5)
    second = 0.5 * 0.6875 * (3 - 0.6875**2)
    assert second == pytest.approx(0.86878, abs=1e-5)


def test_roberts_newton_reference_mode():
    w = D([-2.0, 0.1, 3.0])
    v, rep = hadamard_sign(w, mode="roberts-newton")
    np.testing.assert_allclose(v.values, [-1, 1, 1], atol=1e-8)
    with pytest.raises(ValueError):
        hadamard_sign(w, mode="other")


@pytest.mark.parametrize("cls", BACKENDS)
def test_sqrt_examples(cls):
    v, rep = hadamard_sqrt(cls.unit((2, 2)))
    np.testing.assert_allclose(dense_values(v), 1.0, atol=1e-10)
    v, rep = hadamard_sqrt(as_backend(cls, D([4.0, 9.0])))
    assert rep.converged
    np.testing.assert_allclose(dense_values(v), [2.0, 3.0], rtol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_sqrt_squares_back(seed):
    rng = np.random.default_rng(seed)
    w = tt_from_cp(CpTensor((3, 4, 3), [rng.uniform(0.5, 1.5, (m, 2)) for m in (3, 4, 3)]))
    v, rep = hadamard_sqrt(w, TruncationPolicy(1e-12))
    assert rep.converged
    assert rel_err(dense_values(v) ** 2, dense_values(w)) <= 1e-8


# -- level sets and statistics --------------------------------------------------


W3 = [0.1, 0.5, 0.9]


@pytest.mark.parametrize("cls", BACKENDS)
def test_characteristic_examples(cls):
    w = as_backend(cls, D(W3))
    chi, reps = characteristic(w, (None, 0.6))
    np.testing.assert_allclose(dense_values(chi), [1, 1, 0], atol=1e-6)
    chi, _ = characteristic(w, (0.3, 0.7))
    np.testing.assert_allclose(dense_values(chi), [0, 1, 0], atol=1e-6)
    chi, reps = characteristic(w, Interval())
    assert reps == []
    np.testing.assert_array_equal(dense_values(chi), 1.0)


def test_level_set_examples():
    w = D(W3)
    np.testing.assert_allclose(level_set(w, (None, 0.6)).values, [0.1, 0.5, 0.0], atol=1e-6)
    np.testing.assert_allclose(level_set(w, Interval()).values, W3)


def test_cardinality_probability_examples():
    assert support_cardinality(D([1.0, 1.0, 0.0]))[0] == 2
    assert support_cardinality(CpTensor.unit((2, 3)))[0] == 6
    assert probability(D(W3), (None, 0.6)) == pytest.approx(2 / 3, abs=1e-6)
    assert probability(D(W3), Interval()) == 1.0


@pytest.mark.parametrize("cls", BACKENDS)
def test_mean_variance_examples(cls):
    w = as_backend(cls, D([1.0, 2.0, 3.0]))
    m, v = mean_variance(w)
    assert m == pytest.approx(2.0, abs=1e-10) and v == pytest.approx(2 / 3, abs=1e-10)
    m, v = mean_variance(cls.unit((2, 2)).scale(4.0))
    assert m == pytest.approx(4.0) and v == pytest.approx(0.0, abs=1e-12)


def test_conditional_mean_examples():
    w = D([1.0, 2.0, 3.0])
    assert conditional_mean(w, (1.5, None)) == pytest.approx(2.5, abs=1e-6)
    assert conditional_mean(w, Interval()) == pytest.approx(2.0)
    with pytest.raises(EmptyLevelSetError):
        conditional_mean(w, (5.0, 6.0))


def test_centred_rank_plus_one(rng):
    from hadalg.postproc import centred

    w = random_cp(rng, (3, 3), 2)
    assert centred(w).rank == 3


@given(st.integers(0, 10**6), st.floats(-0.9, 0.9))
def test_probability_complement(seed, a):
    rng = np.random.default_rng(seed)
    w = CpTensor((3, 3, 2), [rng.uniform(-1, 1, (m, 1)) for m in (3, 3, 2)])
    vals = dense_values(w)
    if np.min(np.abs(vals - a)) < 0.05 * np.max(np.abs(vals)):
        return  # keep the instance boundary-free
    t = tt_from_cp(w)
    p = probability(t, (a, None))
    q = probability(t, (None, a))
    assert p + q == pytest.approx(1.0, abs=1e-6)
    assert p == pytest.approx(np.mean(vals > a), abs=1e-6)


# -- power iterations -----------------------------------------------------------


def test_power_step_examples():
    u = DenseTensor.unit((3,))
    v = u.scale(1 / math.sqrt(3))
    out, gamma = power_step(u, v)
    np.testing.assert_allclose(out.values, v.values)
    assert gamma == pytest.approx(1.0)
    w = D([1.0, 3.0, -2.0])
    rep_v = v
    for _ in range(80):
        rep_v, gamma = power_step(w, rep_v)
    assert 1 / gamma == pytest.approx(3.0, rel=1e-10)
    np.testing.assert_allclose(rep_v.values, [0, 1, 0], atol=1e-10)


def test_rayleigh_examples():
    w = D([1.0, 3.0])
    v = D([1.0, 1.0]).scale(1 / math.sqrt(2))
    rho1, rho2, eps = rayleigh(w, v)
    assert (rho1, rho2, eps) == pytest.approx((2.0, 5.0, 1.0))
    assert kb_bound(w, v) == pytest.approx((2.0, 1.0, True))
    out, r1, r2, e = power_rq_step(DenseTensor.unit((3,)), DenseTensor.unit((3,)))
    assert r1 == 1.0 and e == 0.0
    e2 = w.basis((1,))
    assert kb_bound(w, e2) == (3.0, 0.0, True)


def test_exp_power_examples():
    w = D([1.0, 3.0, -2.0])
    y = w.square()
    v1, *_ = exp_power_step(w, y, w.scale(1 / w.norm()))
    np.testing.assert_allclose(v1.values, np.array([1, 9, 4]) / math.sqrt(98))
    v2, *_ = exp_power_step(w, y, v1)
    np.testing.assert_allclose(v2.values, np.array([1, 81, 16]) / math.sqrt(1 + 81**2 + 16**2))
    v = w.scale(1 / w.norm())
    for _ in range(6):
        v, *_ = exp_power_step(w, y, v)
    assert np.linalg.norm(v.values - [0, 1, 0]) <= 1e-10
    # the step rule sees the small step one iteration later
    v, rho1, eps, rep = modulus_max(w, "exp-power", stop=StoppingRule(eta=1e-10))
    assert rep.converged and rep.iterations <= 7
    assert rho1 == pytest.approx(3.0)
    u = DenseTensor.unit((4,))
    v, rho1, eps, rep = modulus_max(u, "exp-power")
    assert rho1 == pytest.approx(1.0) and eps == pytest.approx(0.0, abs=1e-7)


@pytest.mark.parametrize("seed", range(100))
def test_exp_power_kb_non_increasing(seed):
    rng = np.random.default_rng(seed)
    w = DenseTensor((3, 4), rng.uniform(0.1, 1.0, (3, 4)))
    y = w.square()
    v = w.scale(1 / w.norm())
    eps = []
    for _ in range(6):
        v, _, _, e = exp_power_step(w, y, v)
        eps.append(e)
    scale = float(np.max(w.values))
    assert all(b <= a + 1e-12 * scale for a, b in zip(eps[1:], eps[2:]))


@pytest.mark.parametrize("method", ["power", "power-rq", "exp-power"])
def test_find_extreme_small(method):
    w = D([1.0, 3.0, -2.0])
    r = find_extreme(w, "max", method, stop=StoppingRule(eta=1e-12, max_iters=500))
    assert (r.index, r.value) == ((1,), 3.0)
    r = find_extreme(w, "min", method, stop=StoppingRule(eta=1e-12, max_iters=500))
    assert (r.index, r.value) == ((2,), -2.0)
    assert r.to_dict()["index"] == [3]


@pytest.mark.parametrize("fmt", ["cp", "tt"])
def test_find_extreme_poisson(fmt):
    w = poisson_rhs(5, 4)
    x = w if fmt == "cp" else tt_from_cp(w, TruncationPolicy(1e-12))
    r = find_extreme(x, "max", policy=TruncationPolicy(1e-10))
    idx, val = dense_argmax(w.to_dense())
    assert r.index == idx == (2, 2, 2, 2)
    assert w.entry(r.index) == val


def test_shift_for_negative_dominant():
    w = D([-5.0, 1.0, 2.0])
    r = find_extreme(w, "max")
    assert r.index == (2,) and r.value == 2.0
    assert r.flags["shift"] > 0


def test_deflation_skips_found_index():
    w = D([1.0, 3.0, 2.5])
    r = find_extreme(w, "max", deflate=[(1,)])
    assert r.index == (2,)


@given(st.integers(0, 10**6), st.floats(0.5, 3.0), st.floats(-2.0, 2.0))
def test_argmax_affine_invariance(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.0, 1.0, (3, 3))
    vals.ravel()[rng.integers(9)] = 1.5  # isolated maximum
    w = DenseTensor((3, 3), vals)
    r1 = find_extreme(w, "max")
    r2 = find_extreme(w.scale(alpha) + DenseTensor.unit((3, 3)).scale(beta), "max")
    assert r1.index == r2.index == dense_argmax(w)[0]
    assert r2.value == pytest.approx(alpha * r1.value + beta)


# -- closest --------------------------------------------------------------------


def test_closest_examples():
    w = D([1.0, 2.0, 3.0])
    r = closest_to(w, 2.2)
    assert (r.index, r.value) == ((1,), 2.0)
    assert closest_to(w, -5.0).index == dense_argmin(w)[0]
    z = D([0.5, -0.01, 2.0])
    assert closest_to(z, 0.0).index == (1,)


def test_closest_exact_hit():
    w = D([1.0, 2.0, 3.0])
    r = closest_to(w, 2.0)
    assert r.index == (1,) and r.value == 2.0
    assert r.flags.get("exact_hit")


@pytest.mark.parametrize("seed", range(5))
def test_closest_random_tt(seed):
    rng = np.random.default_rng(seed)
    w = CpTensor((3, 3, 3), [rng.uniform(0.2, 1.0, (3, 1)) for _ in range(3)])
    rho = float(rng.uniform(0.0, 0.5))
    r = closest_to(tt_from_cp(w), rho, TruncationPolicy(1e-12))
    assert r.index == dense_closest(w.to_dense(), rho)[0]


def test_estimate_inf_norm():
    w = poisson_rhs(6, 5)
    est = estimate_inf_norm(w)
    true = float(np.max(np.abs(w.to_dense().values)))
    assert true * 0.9 <= est <= w.norm()
    assert estimate_inf_norm(D([1.0, -4.0])) == 4.0


@given(st.integers(0, 10**6))
def test_count_matches_dense(seed):
    rng = np.random.default_rng(seed)
    w = CpTensor((3, 2, 3), [rng.uniform(-1, 1, (m, 2)) for m in (3, 2, 3)])
    vals = dense_values(w)
    lo, hi = sorted(rng.uniform(-1, 1, 2))
    top = np.max(np.abs(vals))
    if min(np.min(np.abs(vals - lo)), np.min(np.abs(vals - hi))) < 0.05 * top or hi - lo < 1e-3:
        return
    chi, _ = characteristic(tt_from_cp(w), (lo, hi), TruncationPolicy(1e-12))
    assert support_cardinality(chi)[0] == dense_level_count(w.to_dense(), (lo, hi))
