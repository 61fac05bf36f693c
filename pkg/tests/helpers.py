"""Shared builders and hypothesis strategies for the test suite."""
import numpy as np
from hypothesis import strategies as st

from hadalg.cp import CpTensor
from hadalg.dense import DenseTensor
from hadalg.tt import TtTensor


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def random_cp(rng, shape, rank):
    return CpTensor(shape, [rng.standard_normal((m, rank)) for m in shape])


def random_tt(rng, shape, ranks):
    """``ranks`` are the interior ranks (length d - 1)."""
    full = [1] + list(ranks) + [1]
    return TtTensor(shape, [rng.standard_normal((full[k], m, full[k + 1])) for k, m in enumerate(shape)])


def dense_values(w):
    return w.to_dense().values


shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)
seeds = st.integers(0, 2**31 - 1)


@st.composite
def cp_tensors(draw, shape=None, max_rank=3):
    shape = shape or draw(shapes)
    r = draw(st.integers(1, max_rank))
    rng = np.random.default_rng(draw(seeds))
    return random_cp(rng, shape, r)


@st.composite
def tt_tensors(draw, shape=None, max_rank=3):
    shape = shape or draw(shapes)
    ranks = [draw(st.integers(1, max_rank)) for _ in range(len(shape) - 1)]
    rng = np.random.default_rng(draw(seeds))
    return random_tt(rng, shape, ranks)


@st.composite
def dense_tensors(draw, shape=None, low=-3.0, high=3.0):
    shape = shape or draw(shapes)
    rng = np.random.default_rng(draw(seeds))
    return DenseTensor(shape, rng.uniform(low, high, shape))


@st.composite
def tensor_pairs(draw):
    """Two tensors of one backend sharing a random shape."""
    shape = draw(shapes)
    kind = draw(st.sampled_from(["dense", "cp", "tt"]))
    make = {"dense": dense_tensors, "cp": cp_tensors, "tt": tt_tensors}[kind]
    return draw(make(shape=shape)), draw(make(shape=shape))
