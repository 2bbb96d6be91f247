import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vbiopsy import tensor as T
from vbiopsy.optim import AdamW, clip_grad_norm, cosine_warm_restarts, global_grad_norm


def make(vals, grads):
    ps = {}
    for k, (v, g) in enumerate(zip(vals, grads)):
        p = T.Tensor(np.array(v, float), requires_grad=True)
        p.grad = np.array(g, float)
        ps[f"p{k}"] = p
    return ps


def test_clip_norm_ten_to_two():
    ps = make([[0.0, 0.0], [0.0]], [[6.0, 0.0], [8.0]])
    before = clip_grad_norm(ps, 2.0)
    assert before == 10.0
    assert global_grad_norm(ps) == pytest.approx(2.0, abs=1e-15)
    assert np.allclose(ps["p0"].grad, [1.2, 0.0]) and np.allclose(ps["p1"].grad, [1.6])


def test_clip_leaves_small_gradients():
    ps = make([[0.0]], [[1.5]])
    clip_grad_norm(ps, 2.0)
    assert ps["p0"].grad[0] == 1.5


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.1, 5.0))
def test_clip_bound(g, c):
    ps = make([[0.0] * len(g)], [g])
    clip_grad_norm(ps, c)
    assert global_grad_norm(ps) <= c * (1 + 1e-12)


def test_schedule_restarts():
    t0, lr = 10, 3e-3
    for e in (0, t0, 2 * t0):
        assert cosine_warm_restarts(e, lr, t0) == lr
    assert cosine_warm_restarts(5, lr, t0) == pytest.approx(lr / 2)
    vals = [cosine_warm_restarts(e, lr, t0) for e in range(t0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert cosine_warm_restarts(t0 - 1, lr, t0, lr_min=1e-4) > 1e-4


def test_adamw_matches_reference():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(3)]
    p = T.Tensor(w0.copy(), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.01, weight_decay=0.1)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        w = w - 0.01 * 0.1 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, w, rtol=0, atol=1e-14)


def test_adamw_first_step_size():
    # bias-corrected first step moves each weight by lr in the gradient's sign
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([3.0, -0.5])
    AdamW({"p": p}, lr=0.1, weight_decay=0.0).step()
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_adamw_skips_missing_grad_and_zero_grad():
    p = T.Tensor(np.ones(2), requires_grad=True)
    opt = AdamW({"p": p})
    opt.step()
    assert np.array_equal(p.data, np.ones(2))
    p.grad = np.ones(2)
    opt.zero_grad()
    assert p.grad is None or not np.any(p.grad)
    assert math.isclose(opt.lr, 5e-5)
