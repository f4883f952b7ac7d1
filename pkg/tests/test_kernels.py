"""Kernel backends: numba and numpy must agree, and both must be correct.

Correctness oracles are independent implementations: scipy.ndimage for the
depthwise convolution and matplotlib.path for point-in-polygon (compared
only away from polygon edges, where the two edge conventions cannot
disagree).
"""

import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from slidemil import kernels
from slidemil.kernels import _numba, _numpy

HAS_NUMBA = _numba is not None


def _rand_case(rng, h=17, w=13, c=5, k=3):
    x = rng.standard_normal((h, w, c))
    kern = rng.standard_normal((k, k, c))
    return x, kern


# --- cross-backend parity -------------------------------------------------


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
@pytest.mark.parametrize("k", [3, 5, 7])
def test_conv_forward_backends_bitwise_equal(k):
    rng = np.random.default_rng(7)
    x, kern = _rand_case(rng, k=k)
    a = _numpy.depthwise_conv2d(x, kern)
    b = _numba.depthwise_conv2d(x, kern)
    assert a.tobytes() == b.tobytes()


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
@pytest.mark.parametrize("k", [3, 5, 7])
def test_conv_grad_input_backends_bitwise_equal(k):
    rng = np.random.default_rng(8)
    g, kern = _rand_case(rng, k=k)
    a = _numpy.depthwise_conv2d_grad_input(g, kern)
    b = _numba.depthwise_conv2d_grad_input(g, kern)
    assert a.tobytes() == b.tobytes()


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
def test_conv_grad_kernel_backends_close():
    rng = np.random.default_rng(9)
    x, kern = _rand_case(rng, k=5)
    g = rng.standard_normal(x.shape)
    a = _numpy.depthwise_conv2d_grad_kernel(g, x, 5)
    b = _numba.depthwise_conv2d_grad_kernel(g, x, 5)
    # summation order differs (pairwise vs sequential), so not bitwise
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
def test_polygon_backends_identical():
    rng = np.random.default_rng(10)
    pts = rng.uniform(-2, 2, size=(300, 2))
    poly = np.array([[0.0, 0.0], [1.5, 0.2], [1.0, 1.7], [-0.5, 1.0]])
    a = _numpy.points_in_polygon(pts, poly)
    b = _numba.points_in_polygon(pts, poly)
    assert np.array_equal(a, b)


# --- correctness against independent oracles ------------------------------


@pytest.mark.parametrize("k", [3, 5, 7])
def test_conv_forward_matches_scipy(k):
    rng = np.random.default_rng(11)
    x, kern = _rand_case(rng, h=20, w=15, c=3, k=k)
    got = _numpy.depthwise_conv2d(x, kern)
    for c in range(x.shape[2]):
        want = ndimage.correlate(x[:, :, c], kern[:, :, c],
                                 mode="constant", cval=0.0)
        np.testing.assert_allclose(got[:, :, c], want, atol=1e-12)


def test_conv_identity_kernel():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((9, 9, 2))
    kern = np.zeros((3, 3, 2))
    kern[1, 1, :] = 1.0
    np.testing.assert_array_equal(_numpy.depthwise_conv2d(x, kern), x)


def test_conv_adjoint_identities():
    """<conv(x,k), g> = <x, grad_input(g,k)> = <k, grad_kernel(g,x)>."""
    rng = np.random.default_rng(13)
    x, kern = _rand_case(rng, h=11, w=9, c=4, k=5)
    g = rng.standard_normal(x.shape)
    lhs = np.sum(_numpy.depthwise_conv2d(x, kern) * g)
    via_input = np.sum(x * _numpy.depthwise_conv2d_grad_input(g, kern))
    via_kernel = np.sum(kern * _numpy.depthwise_conv2d_grad_kernel(g, x, 5))
    assert abs(lhs - via_input) <= 1e-10 * abs(lhs)
    assert abs(lhs - via_kernel) <= 1e-10 * abs(lhs)


def _dist_to_edges(point, poly):
    d = np.inf
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        ab = b - a
        t = np.clip(np.dot(point - a, ab) / np.dot(ab, ab), 0.0, 1.0)
        d = min(d, np.linalg.norm(point - (a + t * ab)))
    return d


def test_polygon_matches_matplotlib_away_from_edges():
    from matplotlib.path import Path

    rng = np.random.default_rng(14)
    poly = np.array([[0.0, 0.0], [2.0, 0.1], [2.5, 1.5], [1.0, 2.2],
                     [-0.3, 1.1]])
    pts = rng.uniform(-1, 3, size=(500, 2))
    keep = np.array([_dist_to_edges(p, poly) > 1e-3 for p in pts])
    got = _numpy.points_in_polygon(pts, poly)
    want = Path(poly).contains_points(pts)
    assert np.array_equal(got[keep], want[keep])


def test_polygon_square_known_points():
    square = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])
    pts = np.array([[2.0, 2.0], [5.0, 2.0], [-1.0, 2.0], [2.0, 4.5]])
    got = _numpy.points_in_polygon(pts, square)
    assert got.tolist() == [True, False, False, False]


def test_polygon_concave():
    # C-shape: the notch on the right is outside
    poly = np.array([[0, 0], [4, 0], [4, 1], [1, 1], [1, 3], [4, 3],
                     [4, 4], [0, 4]], dtype=np.float64)
    pts = np.array([[0.5, 2.0], [2.5, 2.0], [2.5, 0.5], [2.5, 3.5]])
    got = _numpy.points_in_polygon(pts, poly)
    assert got.tolist() == [True, False, True, True]


# --- dispatch -------------------------------------------------------------


def test_set_backend_switches_and_restores():
    original = kernels.active_backend()
    try:
        kernels.set_backend("numpy")
        assert kernels.active_backend() == "numpy"
        if HAS_NUMBA:
            kernels.set_backend("numba")
            assert kernels.active_backend() == "numba"
    finally:
        kernels.set_backend(None)
    assert kernels.active_backend() == original


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_env_flag_disables_numba():
    code = ("import slidemil.kernels as k; print(k.active_backend())")
    env = dict(os.environ, SLIDEMIL_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip().splitlines()[-1] == "numpy"


def test_dispatch_uses_selected_backend():
    rng = np.random.default_rng(15)
    x, kern = _rand_case(rng)
    try:
        kernels.set_backend("numpy")
        want = _numpy.depthwise_conv2d(x, kern)
        got = kernels.depthwise_conv2d(x, kern)
        assert got.tobytes() == want.tobytes()
    finally:
        kernels.set_backend(None)
