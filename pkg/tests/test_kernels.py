"""The numba and numpy kernel paths must agree exactly (or to rounding for float sums)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paretorl import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba path disabled")

small_ints = st.integers(-3, 3).map(float)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)), elements=small_ints))
def test_nondominated_backends_agree(r):
    assert np.array_equal(K.nondominated_mask(r, backend="numba"), K.nondominated_mask(r, backend="numpy"))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 15), st.sampled_from([2, 3])),
              elements=st.floats(0, 1, allow_nan=False)))
def test_hypervolume_backends_agree(pts):
    front = pts[K.nondominated_mask(pts, backend="numpy")]
    ref = np.zeros(pts.shape[1])
    a = K.hypervolume_sweep(front, ref, backend="numba")
    b = K.hypervolume_sweep(front, ref, backend="numpy")
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_tail_sums_backends_agree():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(7, 9))
    lengths = rng.integers(1, 10, 7)
    for gamma in (1.0, 0.9):
        np.testing.assert_allclose(K.discounted_tail_sums(s, lengths, gamma, backend="numba"),
                                   K.discounted_tail_sums(s, lengths, gamma, backend="numpy"), rtol=1e-12)


def test_scatter_rows_backends_agree():
    rng = np.random.default_rng(1)
    idx = rng.integers(0, 5, 40)
    rows = rng.normal(size=(40, 3))
    a, b = np.zeros((5, 3)), np.zeros((5, 3))
    K.scatter_rows(a, idx, rows, backend="numba")
    K.scatter_rows(b, idx, rows, backend="numpy")
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a.sum(0), rows.sum(0), rtol=1e-12)


def test_adamw_backends_bit_identical():
    rng = np.random.default_rng(2)
    n = 257
    p0, g = rng.normal(size=n).astype(np.float32), rng.normal(size=n).astype(np.float32)
    out = []
    for backend in ("numba", "numpy"):
        p, m, v = p0.copy(), np.zeros(n, np.float32), np.zeros(n, np.float32)
        for step in (1, 2, 3):
            K.adamw_update(p, g, m, v, 1e-2, 0.9, 0.99, 1e-8, 0.01, step, backend=backend)
        out.append((p, m, v))
    for x, y in zip(*out):
        assert x.tobytes() == y.tobytes()
