import importlib.util
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehwsn import kernels as kn


def _same(a, b):
    for x, y in zip(a, b):
        x, y = np.asarray(x), np.asarray(y)
        assert x.shape == y.shape
        assert np.array_equal(x, y, equal_nan=x.dtype.kind == "f")


@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(1, 12), st.integers(1, 8))
def test_lloyd_twins_agree(seed, n, k, max_iter):
    r = np.random.default_rng(seed)
    pts = r.random((n, 2))
    if seed % 3 == 0:
        pts = np.round(pts * 4) / 4  # many duplicates and ties
    k = min(k, n)
    first = int(r.integers(n))
    _same(kn._lloyd_nb(pts, k, max_iter, first), kn._lloyd_np(pts, k, max_iter, first))


def test_lloyd_identical_points():
    pts = np.full((10, 2), 0.5)
    centers, labels, n_iter, converged, objective = kn.lloyd(pts, 3, 4, 0)
    # empty clusters are reseeded every round, so this never counts as a fixed point
    assert np.all(centers[labels] == 0.5) and np.all(objective[: n_iter + 1] == 0.0)


@given(
    st.floats(0, 100),
    st.lists(st.floats(-30, 30), max_size=300),
    st.floats(1, 100),
)
def test_clamped_twins_agree(stored, inc, cap):
    stored = min(stored, cap)
    a = kn._clamped_accumulate_nb(stored, np.asarray(inc, dtype=np.float64), cap)
    b = kn._clamped_accumulate_np(stored, np.asarray(inc, dtype=np.float64), cap)
    _same(a[:1], b[:1])
    assert a[1] == b[1] and a[2] == b[2]


def test_clamped_example():
    traj, disc, deficit = kn.clamped_accumulate(10.0, [5.0, -20.0, 1.0, 30.0], 12.0)
    assert traj.tolist() == [12.0, 0.0, 1.0, 12.0]
    assert disc == 3.0 + 19.0 and deficit == 8.0


def test_clamped_conserves(rng):
    inc = rng.normal(0, 5, 1000)
    traj, disc, deficit = kn.clamped_accumulate(3.0, inc, 20.0)
    assert np.all((traj >= 0) & (traj <= 20))
    assert traj[-1] == pytest.approx(3.0 + inc.sum() - disc + deficit)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(12, 11), (16, 15)]), st.booleans())
def test_fixed_dense_twins_agree(seed, bits, saturate):
    qmax, shift = (1 << (bits[0] - 1)) - 1, bits[1]
    r = np.random.default_rng(seed)
    n_out, n_in = int(r.integers(1, 9)), int(r.integers(1, 70))
    wq = r.integers(-qmax, qmax + 1, (n_out, n_in))
    xq = r.integers(-qmax, qmax + 1, (int(r.integers(1, 6)), n_in))
    bq = r.integers(-1000, 1000, n_out)
    if saturate:
        bq = bq + int(r.choice([-1, 1])) * (2**31 - 5000)
    a = kn._fixed_dense_nb(wq, xq, bq, shift)
    b = kn._fixed_dense_np(wq, xq, bq, shift)
    assert np.array_equal(a, b)
    assert np.all((a >= kn.INT32_MIN) & (a <= kn.INT32_MAX))


def test_fixed_dense_saturates():
    wq = np.full((1, 4), 32767)
    xq = np.full((1, 4), 32767)
    out = kn.fixed_dense(wq, xq, np.array([2**31 - 10]), 0)
    assert out[0, 0] == kn.INT32_MAX


def test_fixed_dense_rounding():
    # (3 * 5 + 2) >> 2 = 4, (-3 * 5 + 2) >> 2 = -4 (floor of -3.25)
    assert kn.fixed_dense(np.array([[3], [-3]]), np.array([[5]]), np.zeros(2, dtype=np.int64), 2).tolist() == [[4, -4]]


@pytest.mark.parametrize("flag,expected", [("1", "False"), ("", str(importlib.util.find_spec("numba") is not None))])
def test_disable_flag(flag, expected):
    env = dict(os.environ, EHWSN_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from ehwsn import kernels; print(kernels.NUMBA_ENABLED, kernels._lloyd_impl.__name__)"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.split()
    assert out[0] == expected
    if flag:
        assert out[1] == "_lloyd_np"
