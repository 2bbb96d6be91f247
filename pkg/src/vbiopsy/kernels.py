"""Hot numeric kernels.

Each public function dispatches to a numba-compiled loop nest or to a
vectorised numpy implementation, depending on ``_accel.USE_NUMBA``.  Both
paths compute the same quantity; tests hold them to 1e-10 of each other.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vbiopsy import _accel
from vbiopsy._accel import njit, prange


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad5(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# conv3d: direct reference (offset loop, numpy)
# ---------------------------------------------------------------------------

def conv3d_direct(x, w, stride=1, pad=0):
    """Cross-correlation by summing one shifted slab per kernel tap."""
    n, cin, d, h, wd = x.shape
    cout, cin2, kd, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin2}")
    od, oh, ow = (conv_out_size(s, k, stride, pad) for s, k in zip((d, h, wd), (kd, kh, kw)))
    xp = _pad5(x, pad)
    out = np.zeros((n, cout, od, oh, ow), dtype=np.result_type(x, w))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                slab = xp[:, :, a:a + stride * od:stride, b:b + stride * oh:stride,
                          c:c + stride * ow:stride]
                out += np.einsum("nidhw,oi->nodhw", slab, w[:, :, a, b, c])
    return out


def conv3d_direct_backward(x, w, g, stride=1, pad=0, need_gx=True):
    n, cin, d, h, wd = x.shape
    _, _, kd, kh, kw = w.shape
    od, oh, ow = g.shape[2:]
    xp = _pad5(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                sl = (slice(None), slice(None), slice(a, a + stride * od, stride),
                      slice(b, b + stride * oh, stride), slice(c, c + stride * ow, stride))
                gw[:, :, a, b, c] = np.einsum("nodhw,nidhw->oi", g, xp[sl])
                gxp[sl] += np.einsum("nodhw,oi->nidhw", g, w[:, :, a, b, c])
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return gxp, gw


# ---------------------------------------------------------------------------
# conv3d: fast paths
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv3d_gx_nb(gt, wt, stride, padded_shape):
    # scatter-add of the input gradient; gt is channels-last (n, od, oh, ow, cout)
    # and wt is (cin, kd, kh, kw, cout)
    n, od, oh, ow, cout = gt.shape
    cin, kd, kh, kw = wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3]
    gxp = np.zeros(padded_shape)
    for b in range(n):
        for z in range(od):
            for y in range(oh):
                for x in range(ow):
                    gv = gt[b, z, y, x]
                    for i in range(cin):
                        for a in range(kd):
                            zz = z * stride + a
                            for bb in range(kh):
                                yy = y * stride + bb
                                for c in range(kw):
                                    wv = wt[i, a, bb, c]
                                    s = 0.0
                                    for o in range(cout):
                                        s += gv[o] * wv[o]
                                    gxp[b, i, zz, yy, x * stride + c] += s
    return gxp


def _im2col(xp, k, stride, od, oh, ow):
    # (N, Cin, od, oh, ow, kd, kh, kw) strided view -> columns
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, :stride * (od - 1) + 1:stride, :stride * (oh - 1) + 1:stride,
              :stride * (ow - 1) + 1:stride]
    return win


def conv3d_fast(x, w, stride=1, pad=0):
    """im2col view plus one BLAS contraction.

    Both backends take this route: a GEMM beats any hand loop nest here.
    """
    n, cin, d, h, wd = x.shape
    cout, cin2, kd, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin2}")
    od, oh, ow = (conv_out_size(s, k, stride, pad) for s, k in zip((d, h, wd), (kd, kh, kw)))
    xp = np.ascontiguousarray(_pad5(x, pad), dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    win = _im2col(xp, (kd, kh, kw), stride, od, oh, ow)
    # contract over (cin, kd, kh, kw)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # n, od, oh, ow, cout
    return np.ascontiguousarray(np.moveaxis(out, 4, 1))


def conv3d_fast_backward(x, w, g, stride=1, pad=0, need_gx=True):
    """Gradients w.r.t. input and kernel; input grad is zeros if not needed.

    The kernel gradient is a GEMM in both backends; numba only speeds up the
    strided scatter of the input gradient.
    """
    kd, kh, kw = w.shape[2:]
    od, oh, ow = g.shape[2:]
    xp = np.ascontiguousarray(_pad5(x, pad), dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    win = _im2col(xp, (kd, kh, kw), stride, od, oh, ow)
    gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    if not need_gx:
        gxp = np.zeros_like(xp)
    elif _accel.USE_NUMBA:
        wt = np.ascontiguousarray(w.transpose(1, 2, 3, 4, 0))
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        gxp = _conv3d_gx_nb(gt, wt, stride, xp.shape)
    else:
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    sl = (slice(None), slice(None), slice(a, a + stride * od, stride),
                          slice(b, b + stride * oh, stride), slice(c, c + stride * ow, stride))
                    gxp[sl] += np.einsum("nodhw,oi->nidhw", g, w[:, :, a, b, c])
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp), np.ascontiguousarray(gw)


# ---------------------------------------------------------------------------
# separable 1D filtering along one axis of a 3D grid (zero padded)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _filter_axis0_nb(a, taps):
    n0, n1, n2 = a.shape
    r = (taps.shape[0] - 1) // 2
    out = np.zeros(a.shape)
    for i in range(n0):
        for t in range(taps.shape[0]):
            src = i + t - r
            if src < 0 or src >= n0:
                continue
            wt = taps[t]
            for j in range(n1):
                for k in range(n2):
                    out[i, j, k] += wt * a[src, j, k]
    return out


def _filter_axis0_np(a, taps):
    r = (len(taps) - 1) // 2
    n0 = a.shape[0]
    out = np.zeros(a.shape)
    for t, wt in enumerate(taps):
        off = t - r
        lo, hi = max(0, -off), min(n0, n0 - off)
        if lo < hi:
            out[lo:hi] += wt * a[lo + off:hi + off]
    return out


def filter_axis(a, taps, axis):
    """Correlate ``a`` with odd-length ``taps`` along ``axis``; zeros outside."""
    taps = np.asarray(taps, dtype=np.float64)
    if taps.ndim != 1 or len(taps) % 2 == 0:
        raise ValueError("taps must be a 1D odd-length array")
    moved = np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0))
    fn = _filter_axis0_nb if _accel.USE_NUMBA else _filter_axis0_np
    return np.moveaxis(fn(moved, taps), 0, axis)


# ---------------------------------------------------------------------------
# binary dilation by an L1 (6-connected) ball
# ---------------------------------------------------------------------------

def l1_ball_offsets(radius):
    r = int(radius)
    rng = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(rng, rng, rng, indexing="ij")
    keep = np.abs(dz) + np.abs(dy) + np.abs(dx) <= r
    return np.stack([dz[keep], dy[keep], dx[keep]], axis=1).astype(np.int64)


@njit(cache=True)
def _dilate_nb(src, offsets):
    d, h, w = src.shape
    out = np.zeros(src.shape, dtype=np.uint8)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if src[z, y, x] == 0:
                    continue
                for t in range(offsets.shape[0]):
                    zz = z + offsets[t, 0]
                    yy = y + offsets[t, 1]
                    xx = x + offsets[t, 2]
                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx < w:
                        out[zz, yy, xx] = 1
    return out


def _dilate_np(src, offsets):
    d, h, w = src.shape
    out = np.zeros(src.shape, dtype=np.uint8)
    for dz, dy, dx in offsets:
        zs = slice(max(0, dz), min(d, d + dz))
        ys = slice(max(0, dy), min(h, h + dy))
        xs = slice(max(0, dx), min(w, w + dx))
        zt = slice(max(0, -dz), min(d, d - dz))
        yt = slice(max(0, -dy), min(h, h - dy))
        xt = slice(max(0, -dx), min(w, w - dx))
        out[zs, ys, xs] |= src[zt, yt, xt]
    return out


def dilate_l1(binary, radius):
    src = np.ascontiguousarray(np.asarray(binary) != 0, dtype=np.uint8)
    if radius <= 0:
        return src
    offsets = l1_ball_offsets(radius)
    return _dilate_nb(src, offsets) if _accel.USE_NUMBA else _dilate_np(src, offsets)


# ---------------------------------------------------------------------------
# 6-connected component labelling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _label6_nb(fg):
    d, h, w = fg.shape
    labels = np.zeros(fg.shape, dtype=np.int32)
    stack = np.empty((d * h * w, 3), dtype=np.int64)
    nlab = 0
    for z0 in range(d):
        for y0 in range(h):
            for x0 in range(w):
                if fg[z0, y0, x0] == 0 or labels[z0, y0, x0] != 0:
                    continue
                nlab += 1
                labels[z0, y0, x0] = nlab
                stack[0, 0] = z0
                stack[0, 1] = y0
                stack[0, 2] = x0
                top = 1
                while top > 0:
                    top -= 1
                    z = stack[top, 0]
                    y = stack[top, 1]
                    x = stack[top, 2]
                    for k in range(6):
                        zz, yy, xx = z, y, x
                        if k == 0:
                            zz = z - 1
                        elif k == 1:
                            zz = z + 1
                        elif k == 2:
                            yy = y - 1
                        elif k == 3:
                            yy = y + 1
                        elif k == 4:
                            xx = x - 1
                        else:
                            xx = x + 1
                        if zz < 0 or zz >= d or yy < 0 or yy >= h or xx < 0 or xx >= w:
                            continue
                        if fg[zz, yy, xx] != 0 and labels[zz, yy, xx] == 0:
                            labels[zz, yy, xx] = nlab
                            stack[top, 0] = zz
                            stack[top, 1] = yy
                            stack[top, 2] = xx
                            top += 1
    return labels, nlab


def label6(binary):
    """Label 6-connected foreground components in raster order of first voxel."""
    fg = np.ascontiguousarray(np.asarray(binary) != 0, dtype=np.uint8)
    if _accel.USE_NUMBA:
        labels, n = _label6_nb(fg)
        return labels, int(n)
    from scipy import ndimage

    structure = ndimage.generate_binary_structure(3, 1)
    labels, n = ndimage.label(fg, structure=structure)
    return labels.astype(np.int32), int(n)
