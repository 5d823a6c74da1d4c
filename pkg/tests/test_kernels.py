import os
import subprocess
import sys

import numpy as np
import pytest

from mahafsl import kernels
from mahafsl.errors import DimensionError, NotPositiveDefiniteError


def spd(rng, d, cond=None):
    if cond is None:
        g = rng.standard_normal((d, d))
        return g.T @ g + np.eye(d)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * np.geomspace(1.0, cond, d)) @ q.T


@pytest.mark.parametrize("d", [1, 2, 5, 16])
def test_cholesky_variants_agree(rng, d):
    a = spd(rng, d)
    L_nb, ok_nb = kernels._cholesky_nb(a)
    L_np, ok_np = kernels._cholesky_np(a)
    assert ok_nb and ok_np
    np.testing.assert_allclose(L_nb, L_np, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(L_nb @ L_nb.T, a, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", [kernels._cholesky_nb, kernels._cholesky_np])
def test_cholesky_flags_indefinite(impl):
    _, ok = impl(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert not ok
    _, ok = impl(np.zeros((3, 3)))
    assert not ok


def test_cholesky_raises():
    with pytest.raises(NotPositiveDefiniteError):
        kernels.cholesky(-np.eye(2))
    with pytest.raises(DimensionError):
        kernels.cholesky(np.ones((2, 3)))


def test_cho_solve_variants_agree(rng):
    a = spd(rng, 7)
    b = rng.standard_normal((7, 3))
    L = kernels.cholesky(a)
    x_nb = kernels._cho_solve_nb(L, b)
    x_np = kernels._cho_solve_np(L, b)
    np.testing.assert_allclose(x_nb, x_np, rtol=1e-12)
    np.testing.assert_allclose(a @ x_nb, b, atol=1e-10)
    assert kernels.cho_solve(L, b[:, 0]).shape == (7,)


def test_conv_variants_agree(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out_nb = kernels._conv2d_nb(x, w, b, 1)
    out_np = kernels._conv2d_np(x, w, b, 1)
    np.testing.assert_allclose(out_nb, out_np, rtol=1e-12, atol=1e-12)
    g = rng.standard_normal(out_nb.shape)
    for got, want in zip(kernels._conv2d_backward_nb(x, w, g, 1), kernels._conv2d_backward_np(x, w, g, 1)):
        np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-11)


def test_conv_against_direct_sum(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3))
    out = kernels.conv2d(x, w, np.zeros(1), pad=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    assert out[0, 0, 1, 2] == pytest.approx(np.sum(xp[0, :, 1:4, 2:5] * w[0]), rel=1e-12)


def test_maxpool_variants_agree(rng):
    x = rng.standard_normal((2, 3, 7, 5))
    o1, a1 = kernels._maxpool_nb(x)
    o2, a2 = kernels._maxpool_np(x)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    g = rng.standard_normal(o1.shape)
    np.testing.assert_array_equal(
        kernels._maxpool_backward_nb(g, a1, 7, 5), kernels._maxpool_backward_np(g, a2, 7, 5)
    )
    assert o1.shape == (2, 3, 3, 2)


def test_maxpool_ties_pick_first():
    x = np.ones((1, 1, 2, 2))
    for impl in (kernels._maxpool_nb, kernels._maxpool_np):
        _, arg = impl(x)
        assert arg[0, 0, 0, 0] == 0


def test_env_flag_selects_numpy_backend():
    code = (
        "import numpy as np, mahafsl, mahafsl.kernels as k;"
        "print(mahafsl.backend_name(), k._cholesky is k._cholesky_np)"
    )
    env = dict(os.environ, FSL_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]
