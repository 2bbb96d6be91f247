"""Small reverse-mode autodiff over numpy arrays.

A ``Tensor`` records the op that produced it together with a closure that
pushes its gradient to its parents.  ``backward`` walks the graph once in
reverse topological order and then releases the saved closures, so a second
``backward`` on the same graph raises ``GraphError``.

Training math runs in float64; ``Tensor(x, dtype=np.float32)`` gives the
reduced-precision inference path.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from vbiopsy import kernels


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_done")

    def __init__(self, data, requires_grad=False, dtype=np.float64, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # arithmetic sugar, enough for tests and losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self, grad=None):
        if self._done:
            raise GraphError("backward already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("backward called on a tensor that does not track gradients")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._parents:
                node._backward = None
                node._done = True
        self._done = True

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    parents = tuple(parents)
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype, _parents=parents if track else (), _op=op)
    if track:
        if any(p._done for p in parents):
            raise GraphError("cannot extend a graph that has already been backpropagated")
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def tsum(x):
    def bw(g):
        x._accum(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), "sum", bw)


def tmean(x):
    n = x.data.size

    def bw(g):
        x._accum(np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), "mean", bw)


def reshape(x, shape):
    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def relu(x):
    pos = x.data > 0

    def bw(g):
        x._accum(g * pos)

    return _make(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,), "relu", bw)


def _sigmoid(a):
    out = np.empty_like(a)
    p = a >= 0
    out[p] = 1.0 / (1.0 + np.exp(-a[p]))
    e = np.exp(a[~p])
    out[~p] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)

    def bw(g):
        x._accum(g * s * (1.0 - s))

    return _make(s, (x,), "sigmoid", bw)


def _log_softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x):
    """Softmax over the last axis."""
    s = np.exp(_log_softmax(x.data))
    s = s / s.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), "softmax", bw)


def linear(x, weight, bias=None):
    """x[..., in] @ weight[out, in].T + bias[out]."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            x._accum(g @ weight.data)
        if weight.requires_grad:
            weight._accum(g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, "linear", bw)


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; order is preserved."""
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def concat_channels(a, b):
    return concat([a, b], axis=-1)


def dropout(x, p, rng=None, training=True):
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        x._accum(g * keep)

    return _make(x.data * keep, (x,), "dropout", bw)


# ---------------------------------------------------------------------------
# volumetric ops
# ---------------------------------------------------------------------------

def conv3d(x, w, b=None, stride=1, pad=0, fast=True):
    """Direct 3D cross-correlation; x[N,Cin,D,H,W], w[Cout,Cin,kd,kh,kw]."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError(f"conv3d wants 5D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    for n, k in zip(x.shape[2:], w.shape[2:]):
        if n + 2 * pad < k:
            raise ValueError(f"conv3d: spatial size {x.shape[2:]} too small for kernel {w.shape[2:]}")
    fwd = kernels.conv3d_fast if fast else kernels.conv3d_direct
    bwd = kernels.conv3d_fast_backward if fast else kernels.conv3d_direct_backward
    out = fwd(x.data.astype(np.float64), w.data.astype(np.float64), stride, pad)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)
    out = out.astype(x.data.dtype)

    def bw(g):
        gx, gw = bwd(x.data.astype(np.float64), w.data.astype(np.float64), g.astype(np.float64),
                     stride, pad, need_gx=x.requires_grad)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3, 4)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv3d", bw)


def gap(f):
    """Global average pooling over the trailing three (spatial) axes."""
    n = np.prod(f.shape[-3:])

    def bw(g):
        f._accum(np.broadcast_to(g[..., None, None, None] / n, f.shape))

    return _make(f.data.mean(axis=(-3, -2, -1)), (f,), "gap", bw)


def masked_avg_pool(f, m, eps=1e-6):
    """z_c = sum(F_c * M) / (sum(M) + eps) over the spatial axes.

    ``f`` is [..., C, D, H, W]; ``m`` is [..., D, H, W] and is treated as a
    constant (no gradient flows into the mask).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    mdat = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if mdat.shape[-3:] != f.shape[-3:]:
        raise ValueError(f"mask spatial shape {mdat.shape[-3:]} != feature shape {f.shape[-3:]}")
    mexp = mdat[..., None, :, :, :]
    denom = mdat.sum(axis=(-3, -2, -1))[..., None] + eps
    z = (f.data * mexp).sum(axis=(-3, -2, -1)) / denom

    def bw(g):
        f._accum((g / denom)[..., None, None, None] * mexp)

    return _make(z, (f,), "masked_avg_pool", bw)


def channel_scale(f, w):
    """F_att[..., c, :, :, :] = w[..., c] * F[..., c, :, :, :]."""
    wexp = w.data[..., None, None, None]

    def bw(g):
        if f.requires_grad:
            f._accum(g * wexp)
        if w.requires_grad:
            w._accum((g * f.data).sum(axis=(-3, -2, -1)))

    return _make(f.data * wexp, (f, w), "channel_scale", bw)


def channel_gate(f, z, params):
    """w = sigmoid(W2 relu(W1 z + b1) + b2);  F_att = F scaled per channel by w.

    ``params`` maps ``w1, b1, w2, b2`` to tensors.
    """
    c = f.shape[-4]
    if z.shape[-1] != c or params["w1"].shape[1] != c or params["w2"].shape[0] != c:
        raise ValueError(f"channel gate dims mismatch: C={c}, z={z.shape}, "
                         f"w1={params['w1'].shape}, w2={params['w2'].shape}")
    hidden = relu(linear(z, params["w1"], params["b1"]))
    w = sigmoid(linear(hidden, params["w2"], params["b2"]))
    return w, channel_scale(f, w)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def smoothed_targets(labels, k, eps_ls):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    off = eps_ls / (k - 1) if k > 1 else 0.0
    t = np.full((labels.size, k), off)
    t[np.arange(labels.size), labels] = 1.0 - eps_ls
    return t


def cross_entropy_smoothed(logits, labels, eps_ls=0.0, reduction_size=None):
    """Mean over the batch of -sum(target * log_softmax(logits)).

    ``reduction_size`` overrides the divisor, which gradient accumulation uses
    to express each micro-batch as its share of the effective-batch mean.
    """
    n, k = logits.shape
    t = smoothed_targets(labels, k, eps_ls)
    denom = n if reduction_size is None else reduction_size
    logp = _log_softmax(logits.data)
    loss = -(t * logp).sum() / denom

    def bw(g):
        p = np.exp(logp)
        logits._accum(g * (p - t) / denom)

    return _make(np.asarray(loss), (logits,), "cross_entropy", bw)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of sigmoid(logits) against {0, 1} targets."""
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    a = logits.data
    # log(1 + exp(-|a|)) form keeps large logits finite
    loss = (np.maximum(a, 0) - a * t + np.log1p(np.exp(-np.abs(a)))).mean()
    n = a.size

    def bw(g):
        logits._accum(g * (_sigmoid(a) - t) / n)

    return _make(np.asarray(loss), (logits,), "bce", bw)


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

def grad_check(fn, params, h=1e-5, abs_floor=1e-6):
    """Largest relative error between backprop and central differences.

    ``fn`` rebuilds the graph from ``params`` and returns a scalar Tensor.
    The relative error of each element is ``|num - ana| / max(|num|, |ana|,
    abs_floor)``; the floor keeps near-zero gradients from blowing up the ratio.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            diff = abs(num - gflat[i])
            worst = max(worst, diff / max(abs(num), abs(gflat[i]), abs_floor))
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# checkpoints: u64 header length | JSON header | little-endian f64 payloads
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VBCK"


def save_params(path, params, meta=None):
    names = list(params)
    layout = [{"name": n, "shape": list(params[n].shape)} for n in names]
    header = json.dumps({"layout": layout, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_params(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    header = json.loads(buf[12:12 + hlen].decode())
    off = 12 + hlen
    params = {}
    for entry in header["layout"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        off += 8 * n
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} unexpected trailing bytes")
    return params, header["meta"]
