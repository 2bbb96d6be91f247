import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vbiopsy import kernels
from vbiopsy.localizer import gaussian_blur3d, gaussian_taps


def naive_conv(x, w, stride, pad):
    """Scalar six-deep loop, the slowest possible reference."""
    n, cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od, oh, ow = ((s + 2 * pad - k) // stride + 1 for s, k in zip((d, h, wd), (kd, kh, kw)))
    out = np.zeros((n, cout, od, oh, ow))
    for b, o, z, y, x_ in itertools.product(range(n), range(cout), range(od), range(oh), range(ow)):
        patch = xp[b, :, z * stride:z * stride + kd, y * stride:y * stride + kh, x_ * stride:x_ * stride + kw]
        out[b, o, z, y, x_] = (patch * w[o]).sum()
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_direct_conv_matches_naive(rng, stride, pad):
    x = rng.normal(size=(2, 2, 5, 4, 6))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    assert np.abs(kernels.conv3d_direct(x, w, stride, pad) - naive_conv(x, w, stride, pad)).max() < 1e-12


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_fast_conv_matches_reference(backend, rng, stride, pad):
    x = rng.normal(size=(2, 3, 8, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    ref = kernels.conv3d_direct(x, w, stride, pad)
    assert np.abs(kernels.conv3d_fast(x, w, stride, pad) - ref).max() <= 1e-10
    g = rng.normal(size=ref.shape)
    gx0, gw0 = kernels.conv3d_direct_backward(x, w, g, stride, pad)
    gx1, gw1 = kernels.conv3d_fast_backward(x, w, g, stride, pad)
    assert np.abs(gx0 - gx1).max() <= 1e-10
    assert np.abs(gw0 - gw1).max() <= 1e-10


def test_conv_backward_is_adjoint(rng):
    # <conv(x), g> == <x, conv^T(g)> and == <w, dW>
    x = rng.normal(size=(1, 2, 6, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    y = kernels.conv3d_direct(x, w, 2, 1)
    g = rng.normal(size=y.shape)
    gx, gw = kernels.conv3d_direct_backward(x, w, g, 2, 1)
    assert np.isclose((y * g).sum(), (x * gx).sum(), rtol=1e-12)
    assert np.isclose((y * g).sum(), (w * gw).sum(), rtol=1e-12)


def test_out_size():
    assert kernels.conv_out_size(32, 3, 2, 1) == 16
    assert kernels.conv_out_size(5, 3, 1, 0) == 3


def dense_gaussian(a, sigma):
    taps = gaussian_taps(sigma)
    k3 = taps[:, None, None] * taps[None, :, None] * taps[None, None, :]
    r = len(taps) // 2
    ap = np.pad(a, r)
    out = np.zeros_like(a, dtype=np.float64)
    for dz, dy, dx in itertools.product(range(len(taps)), repeat=3):
        out += k3[dz, dy, dx] * ap[dz:dz + a.shape[0], dy:dy + a.shape[1], dx:dx + a.shape[2]]
    return out


@given(st.tuples(*[st.integers(1, 16)] * 3), st.floats(0.4, 2.5), st.integers(0, 2**31))
def test_separable_gaussian_equals_dense(dims, sigma, seed):
    a = np.random.default_rng(seed).random(dims)
    assert np.abs(gaussian_blur3d(a, sigma) - dense_gaussian(a, sigma)).max() <= 1e-6


def test_filter_backends_agree(rng):
    from vbiopsy import _accel

    a = rng.random((9, 7, 5))
    taps = gaussian_taps(1.3)
    outs = []
    for flag in (True, False):
        prev = _accel.set_backend(flag)
        try:
            outs.append([kernels.filter_axis(a, taps, ax) for ax in range(3)])
        finally:
            _accel.set_backend(prev)
    for p, q in zip(*outs):
        assert np.abs(p - q).max() < 1e-12


def test_filter_rejects_even_taps():
    with pytest.raises(ValueError):
        kernels.filter_axis(np.zeros((3, 3, 3)), [0.5, 0.5], 0)


@pytest.mark.parametrize("radius", [0, 1, 2, 3])
def test_dilation_of_impulse_is_l1_ball(backend, radius):
    a = np.zeros((9, 9, 9), dtype=np.uint8)
    a[4, 4, 4] = 1
    out = kernels.dilate_l1(a, radius)
    g = np.indices(a.shape)
    ball = (np.abs(g - 4).sum(axis=0) <= radius)
    assert np.array_equal(out.astype(bool), ball)
    assert out.sum() == {0: 1, 1: 7, 2: 25, 3: 63}[radius]


@given(st.integers(0, 2**31), st.integers(0, 3))
def test_dilation_matches_distance_oracle(seed, radius):
    a = np.random.default_rng(seed).random((6, 7, 5)) > 0.9
    out = kernels.dilate_l1(a, radius).astype(bool)
    pts = np.argwhere(a)
    g = np.indices(a.shape).reshape(3, -1).T
    if len(pts):
        dist = np.abs(g[:, None, :] - pts[None, :, :]).sum(axis=2).min(axis=1)
        ref = (dist <= radius).reshape(a.shape)
    else:
        ref = np.zeros(a.shape, bool)
    assert np.array_equal(out, ref)


def test_label6_components(backend):
    a = np.zeros((6, 6, 6), dtype=bool)
    a[0, 0, 0:3] = True
    a[3:5, 3:5, 3:5] = True
    a[1, 1, 3] = True  # diagonal to nothing, isolated
    a[0, 1, 2] = True  # face-adjacent to the first run
    labels, n = kernels.label6(a)
    assert n == 3
    sizes = sorted(np.bincount(labels.ravel())[1:].tolist())
    assert sizes == [1, 4, 8]


def test_label6_diagonal_not_connected(backend):
    a = np.zeros((3, 3, 3), dtype=bool)
    a[0, 0, 0] = a[1, 1, 1] = True
    assert kernels.label6(a)[1] == 2
