import numpy as np
import pytest
from hypothesis import given, strategies as st

from hadalg.core import ShapeMismatchError, TruncationPolicy
from hadalg.cp import CpTensor, cp_scale, dense_to_cp_exact
from hadalg.dense import DenseTensor, dense_inner

from helpers import cp_tensors, dense_values, random_cp, rel_err


def test_scale_examples():
    w = CpTensor.unit((2, 2, 2))
    s = cp_scale(8.0, w)
    for f in s.factors:
        np.testing.assert_allclose(f[:, 0], [2, 2])
    np.testing.assert_allclose(dense_values(s), 8.0)
    np.testing.assert_array_equal(cp_scale(1.0, w).factors[0], w.factors[0])
    s = cp_scale(-8.0, w)
    np.testing.assert_allclose(s.factors[0][:, 0], [-2, -2])
    np.testing.assert_allclose(s.factors[1][:, 0], [2, 2])
    np.testing.assert_allclose(dense_values(s), -8.0)


def test_add_examples():
    a = CpTensor.elementary((2, 2), [[1, 0], [1, 1]])
    b = CpTensor.elementary((2, 2), [[0, 1], [2, 0]])
    s = a + b
    assert s.rank == 2
    assert s.entry((0, 0)) == 1.0
    assert s.entry((1, 0)) == 2.0
    np.testing.assert_array_equal(dense_values(s), [[1, 1], [2, 0]])
    z = a + CpTensor.zero((2, 2))
    assert z.rank == 1 and CpTensor.zero((2, 2)).rank == 0


def test_rank_bookkeeping(rng):
    u = random_cp(rng, (3, 3, 3), 3)
    v = random_cp(rng, (3, 3, 3), 5)
    assert (u + v).rank == 8
    assert random_cp(rng, (3, 4), 2).hadamard(random_cp(rng, (3, 4), 3)).rank == 6


def test_hadamard_rank_one_example():
    u = CpTensor.elementary((2, 2), [[1, 2], [3, 4]])
    v = CpTensor.elementary((2, 2), [[5, 6], [7, 8]])
    p = u.hadamard(v)
    assert p.rank == 1
    # factors are balanced, so compare directions and the full tensor
    f0, f1 = p.factors[0][:, 0], p.factors[1][:, 0]
    assert abs(f0[1] / f0[0] - 12 / 5) < 1e-14 and abs(f1[1] / f1[0] - 32 / 21) < 1e-14
    np.testing.assert_allclose(dense_values(p), np.outer([5, 12], [21, 32]))
    np.testing.assert_allclose(dense_values(u.hadamard(CpTensor.unit((2, 2)))), dense_values(u))


def test_inner_examples(rng):
    a = CpTensor.unit((2, 2))
    b = CpTensor.elementary((2, 2), [[1, 2], [3, 4]])
    assert a.inner(b) == pytest.approx(21.0)
    assert a.inner(CpTensor.zero((2, 2))) == 0.0
    u = random_cp(rng, (3, 3, 3), 3)
    v = random_cp(rng, (3, 3, 3), 3)
    assert u.inner(v) == pytest.approx(dense_inner(u.to_dense(), v.to_dense()), abs=1e-12)


def test_entry_examples(rng):
    assert CpTensor.unit((2, 3)).entry((1, 2)) == 1.0
    w = random_cp(rng, (3, 4, 5), 4)
    full = dense_values(w)
    for _ in range(50):
        idx = tuple(int(rng.integers(m)) for m in w.shape)
        assert w.entry(idx) == pytest.approx(full[idx], rel=1e-14, abs=1e-15)


def test_unit():
    u = CpTensor.unit((2, 3))
    assert u.rank == 1
    np.testing.assert_array_equal(dense_values(u), 1.0)
    np.testing.assert_array_equal(dense_values(u.hadamard(u)), 1.0)


def test_shape_checks():
    with pytest.raises(ShapeMismatchError):
        CpTensor.unit((2, 2)).add(CpTensor.unit((2, 3)))
    with pytest.raises(ValueError):
        CpTensor((2, 2), [np.ones((2, 1)), np.ones((2, 2))])


def test_duplicate_terms_collapse():
    a = np.array([1.0, 2.0, -1.0])
    b = np.array([0.5, 0.0, 3.0])
    w = CpTensor((3, 3), [np.column_stack([a, a]), np.column_stack([b, b])])
    t, info = w.truncate(TruncationPolicy(0.0))
    assert t.rank == 1 and info.error <= 1e-14 * w.norm()
    np.testing.assert_allclose(dense_values(t), 2 * np.outer(a, b), atol=1e-14)


def test_exact_recompression(rng):
    w = random_cp(rng, (3, 3, 3), 3)
    t, info = w.truncate(TruncationPolicy(0.0, max_rank=3))
    assert rel_err(dense_values(t), dense_values(w)) <= 1e-10
    assert not info.tolerance_miss


def test_product_with_lower_true_rank(rng):
    a = random_cp(rng, (4, 4, 4), 1)
    b = random_cp(rng, (4, 4, 4), 1)
    u = a + b
    v = a + b + a.scale(0.5)
    w = u.hadamard(v)
    assert w.rank == 6
    eps = 1e-8
    t, info = w.truncate(TruncationPolicy(eps))
    assert t.rank <= 3
    err = np.linalg.norm(dense_values(t) - dense_values(w))
    assert err <= eps * np.linalg.norm(dense_values(w))


def test_rank_cap_flags_tolerance_miss(rng):
    w = random_cp(rng, (4, 4, 4), 3)
    t, info = w.truncate(TruncationPolicy(1e-12, max_rank=1))
    assert t.rank == 1 and info.tolerance_miss
    assert info.error > 1e-12 * w.norm()


def test_dense_round_trip(rng):
    u = CpTensor.unit((2, 3))
    np.testing.assert_array_equal(dense_values(u), np.ones((2, 3)))
    w = random_cp(rng, (3, 3, 3), 2)
    back = dense_to_cp_exact(w.to_dense())
    assert rel_err(dense_values(back), dense_values(w)) <= 1e-12


def test_peak_index_rank_one(rng):
    # the rule targets concentrated iterates: one entry per mode dominates
    vecs = [np.abs(rng.standard_normal(m)) for m in (4, 5, 3)]
    for v in vecs:
        v[int(rng.integers(v.size))] += 5.0
    w = CpTensor.elementary((4, 5, 3), vecs)
    assert w.peak_index() == tuple(int(np.argmax(v)) for v in vecs)


def test_norm_survives_cancellation():
    # two large terms that cancel up to a small remainder
    a = np.array([1.0, 1.0])
    big = CpTensor((2, 2), [np.column_stack([a * 1e6, -a * 1e6]), np.column_stack([a, a + [1e-6, 0]])])
    exact = np.linalg.norm(dense_values(big))
    assert big.norm() == pytest.approx(exact, rel=1e-6)


@given(st.data())
def test_ops_match_dense(data):
    u = data.draw(cp_tensors())
    v = data.draw(cp_tensors(shape=tuple(u.shape)))
    alpha = data.draw(st.floats(-3, 3, allow_nan=False))
    U, V = dense_values(u), dense_values(v)
    assert rel_err(dense_values(u + v), U + V) <= 1e-12
    assert rel_err(dense_values(u.scale(alpha)), alpha * U) <= 1e-12
    assert rel_err(dense_values(u.hadamard(v)), U * V) <= 1e-12
    assert u.inner(v) == pytest.approx(float(np.sum(U * V)), rel=1e-10, abs=1e-10 * np.linalg.norm(U) * np.linalg.norm(V))
    assert (u + v).rank == u.rank + v.rank
    assert u.hadamard(v).rank == u.rank * v.rank


@given(cp_tensors(max_rank=3), st.sampled_from([1e-2, 1e-4, 1e-8]))
def test_truncation_contracts(w, eps):
    t, info = w.truncate(TruncationPolicy(eps))
    W = dense_values(w)
    err = np.linalg.norm(dense_values(t) - W)
    assert not info.tolerance_miss
    assert err <= eps * np.linalg.norm(W) + 1e-13 * np.linalg.norm(W)
    assert t.rank <= w.rank


@given(cp_tensors(max_rank=2))
def test_square_matches_hadamard(w):
    np.testing.assert_allclose(dense_values(w.square()), dense_values(w) ** 2, rtol=1e-12, atol=1e-12 * np.max(np.abs(dense_values(w))) ** 2)


def test_dense_conversion_exact_format():
    d = DenseTensor((2, 2), [[1.0, 0.0], [0.0, 2.0]])
    c = dense_to_cp_exact(d)
    np.testing.assert_array_equal(dense_values(c), d.values)
