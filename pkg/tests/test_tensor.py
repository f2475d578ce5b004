import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfuse import tensor as T
from crossfuse.tensor import ComputationRecord, ContractViolation, Tensor

from oracles import bilinear_loop, conv1x1_loop, conv2d_loop, max_pool_loop, numeric_grad


def t64(a, grad=True):
    return Tensor(np.ascontiguousarray(a, dtype=np.float64), requires_grad=grad)


def backprop(loss_fn, *tensors):
    with ComputationRecord() as rec:
        loss = loss_fn()
    rec.backward(loss)
    return [t.grad for t in tensors]


# ---------------------------------------------------------------------------
# forward against loop oracles
# ---------------------------------------------------------------------------

def test_conv1x1_matches_loop_oracle_100_cases():
    rng = np.random.default_rng(11)
    for _ in range(100):
        ci, co = rng.integers(1, 6, 2)
        h, w = rng.integers(1, 7, 2)
        x, wt = rng.normal(size=(ci, h, w)), rng.normal(size=(co, ci))
        out = T.conv1x1(t64(x), t64(wt)).data
        np.testing.assert_allclose(out, conv1x1_loop(x, wt), atol=1e-6, rtol=0)


def test_dilated_max_pool_matches_loop_oracle_exactly_100_cases():
    rng = np.random.default_rng(12)
    for case in range(100):
        k = int(rng.choice([1, 3, 5, 7]))
        d = int(rng.integers(1, 5))
        c, h, w = rng.integers(1, 4), rng.integers(1, 12), rng.integers(1, 12)
        # small integer values force plenty of ties
        x = rng.integers(-3, 4, (c, h, w)).astype(np.float64) if case % 2 else rng.normal(size=(c, h, w))
        want, _ = max_pool_loop(x, k, d)
        assert np.array_equal(T.dilated_max_pool(t64(x), k, d).data, want)


def test_dilated_max_pool_routes_gradient_to_first_maximal_tap():
    rng = np.random.default_rng(13)
    for _ in range(30):
        k, d = int(rng.choice([3, 5])), int(rng.integers(1, 4))
        x = rng.integers(-2, 3, (2, 7, 6)).astype(np.float64)
        g = rng.normal(size=x.shape)
        xt = t64(x)
        (gx,) = backprop(lambda: T.weighted_sum(T.dilated_max_pool(xt, k, d), g), xt)
        _, src = max_pool_loop(x, k, d)
        want = np.zeros_like(x)
        for c in range(x.shape[0]):
            np.add.at(want[c].reshape(-1), src[c].ravel(), g[c].ravel())
        np.testing.assert_allclose(gx, want, atol=1e-12)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(14)
    for stride in (1, 2):
        for k in (1, 3):
            x, w = rng.normal(size=(3, 7, 6)), rng.normal(size=(4, 3, k, k))
            np.testing.assert_allclose(T.conv2d(t64(x), t64(w), stride).data, conv2d_loop(x, w, stride), atol=1e-10)


def test_resize_matches_loop_oracle():
    rng = np.random.default_rng(15)
    for h, w, oh, ow in [(4, 4, 8, 8), (8, 8, 4, 4), (16, 16, 4, 4), (5, 3, 7, 2), (1, 1, 3, 3)]:
        x = rng.normal(size=(2, h, w))
        np.testing.assert_allclose(T.resize_bilinear(t64(x), oh, ow).data, bilinear_loop(x, oh, ow), atol=1e-12)


def test_batched_leading_dims_equal_per_sample():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(3, 4, 8, 8))
    w = rng.normal(size=(5, 4, 3, 3))
    batched = T.conv2d(t64(x), t64(w), 2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.conv2d(t64(x[i]), t64(w), 2).data, atol=1e-12)
    pooled = T.dilated_max_pool(t64(x), 5, 2).data
    for i in range(3):
        assert np.array_equal(pooled[i], T.dilated_max_pool(t64(x[i]), 5, 2).data)


# ---------------------------------------------------------------------------
# backward against finite differences
# ---------------------------------------------------------------------------

def _check_grads(build, arrays, tol=1e-6):
    rng = np.random.default_rng(0)
    ts = [t64(a) for a in arrays]
    out_dims = build(*ts).dims
    probe = rng.normal(size=out_dims)
    grads = backprop(lambda: T.weighted_sum(build(*ts), probe), *ts)
    for t, g in zip(ts, grads):
        num = numeric_grad(lambda: float((build(*ts).data * probe).sum()), t.data)
        np.testing.assert_allclose(g, num, atol=tol, rtol=tol)


@pytest.mark.parametrize("name", ["add", "mul", "scale", "sigmoid", "softmax", "conv1x1", "add_bias", "conv2d",
                                  "conv2d_s2", "divide", "resize_up", "resize_down", "channel_dot", "mul_map", "stack",
                                  "select", "concat", "add_n", "relu"])
def test_backward_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.normal(size=(2, 3, 4, 4))
    y = rng.normal(size=(2, 3, 4, 4))
    cases = {
        "add": (T.add, [x, y]),
        "mul": (T.mul, [x, y]),
        "scale": (lambda a: T.scale(a, -1.7), [x]),
        "divide": (lambda a: T.divide(a, 3), [x]),
        "sigmoid": (T.sigmoid_map, [x * 3]),
        "softmax": (lambda a: T.softmax_axis(a, -3), [x]),
        "conv1x1": (T.conv1x1, [x, rng.normal(size=(5, 3))]),
        "add_bias": (T.add_bias, [x, rng.normal(size=3)]),
        "conv2d": (T.conv2d, [x, rng.normal(size=(2, 3, 3, 3))]),
        "conv2d_s2": (lambda a, w: T.conv2d(a, w, 2), [x, rng.normal(size=(2, 3, 3, 3))]),
        "resize_up": (lambda a: T.resize_bilinear(a, 7, 9), [x]),
        "resize_down": (lambda a: T.resize_bilinear(a, 2, 3), [x]),
        "channel_dot": (T.channel_dot, [x, y]),
        "mul_map": (T.mul_map, [x, rng.normal(size=(2, 4, 4))]),
        "stack": (lambda a, b: T.stack([a, b], -3), [x, y]),
        "select": (lambda a: T.select(a, 1, -3), [x]),
        "concat": (lambda a, b: T.concat_channels([a, b]), [x, y[:, :2]]),
        "add_n": (lambda a, b: T.add_n([a, b, a]), [x, y]),
        "relu": (T.relu, [x + np.sign(x) * 0.1]),
    }
    fn, arrays = cases[name]
    _check_grads(fn, arrays)


def test_cross_entropy_gradient_and_weighting():
    rng = np.random.default_rng(3)
    logits = t64(rng.normal(size=(2, 3, 4, 4)))
    labels = rng.integers(0, 3, (2, 4, 4))
    cw = [0.5, 2.0, 3.0]
    (g,) = backprop(lambda: T.cross_entropy(logits, labels, cw), logits)
    num = numeric_grad(lambda: float(T.cross_entropy(logits, labels, cw).data), logits.data)
    np.testing.assert_allclose(g, num, atol=1e-7)
    # uniform weights give the plain mean negative log-likelihood
    z = logits.data
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    want = -np.mean(np.take_along_axis(logp, labels[:, None], axis=1))
    assert float(T.cross_entropy(logits, labels).data) == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# record semantics
# ---------------------------------------------------------------------------

def test_gradient_accumulates_for_reused_tensor():
    x = t64([[[1.0, -2.0]]])
    (g,) = backprop(lambda: T.sum_all(T.add(T.scale(x, 3.0), x)), x)
    np.testing.assert_array_equal(g, [[[4.0, 4.0]]])


def test_visit_order_is_reverse_of_creation():
    x = t64(np.ones((1, 2, 2)))
    with ComputationRecord() as rec:
        loss = T.sum_all(T.relu(T.scale(x, 2.0)))
    assert rec.backward(loss) == ["sum_all", "relu", "scale"]


def test_no_record_outside_context_and_constants_untracked():
    x = t64(np.ones((1, 2, 2)))
    assert not T.scale(x, 2.0).requires_grad
    c = Tensor(np.ones((1, 2, 2)))
    with ComputationRecord() as rec:
        T.scale(c, 2.0)
    assert len(rec) == 0


def test_backward_rejects_non_scalar():
    x = t64(np.ones((1, 2, 2)))
    with ComputationRecord() as rec:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractViolation):
        rec.backward(y)


@pytest.mark.parametrize("call", [
    lambda: T.add(t64(np.ones((1, 2, 2))), t64(np.ones((1, 2, 3)))),
    lambda: T.conv1x1(t64(np.ones((3, 2, 2))), t64(np.ones((2, 4)))),
    lambda: T.dilated_max_pool(t64(np.ones((1, 4, 4))), 4, 1),
    lambda: T.dilated_max_pool(t64(np.ones((1, 4, 4))), 3, 0),
    lambda: T.resize_bilinear(t64(np.ones((1, 4, 4))), 0, 2),
    lambda: T.softmax_axis(t64(np.ones((1, 4, 4))), 3),
])
def test_contract_violations(call):
    with pytest.raises(ContractViolation):
        call()


def test_precision_env(monkeypatch):
    monkeypatch.setenv("CROSSFUSE_PRECISION", "f64")
    assert Tensor([1.0, 2.0]).dtype == np.float64
    monkeypatch.setenv("CROSSFUSE_PRECISION", "f32")
    assert Tensor([1.0, 2.0]).dtype == np.float32
    monkeypatch.setenv("CROSSFUSE_PRECISION", "f16")
    with pytest.raises(ContractViolation):
        T.default_dtype()


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(k=st.sampled_from([1, 3, 5]), d=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9),
       seed=st.integers(0, 2**31))
def test_pool_is_at_least_input_and_idempotent_for_k1(k, d, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(2, h, w))
    out = T.dilated_max_pool(t64(x), k, d).data
    assert out.shape == x.shape
    assert np.all(out >= x)
    if k == 1:
        assert np.array_equal(out, x)


@settings(max_examples=60, deadline=None)
@given(n_in=st.integers(1, 20), n_out=st.integers(1, 20))
def test_interp_rows_are_convex_combinations(n_in, n_out):
    m = T.interp_matrix(n_in, n_out)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(m >= 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), axis=st.sampled_from([0, 1, 2]))
def test_softmax_sums_to_one_even_for_large_logits(seed, axis):
    x = np.random.default_rng(seed).normal(scale=300.0, size=(3, 4, 5))
    y = T.softmax_axis(t64(x), axis).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)


def test_sigmoid_stable_at_extremes():
    y = T.sigmoid_map(t64([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y)) and y[1] == 0.5


# ---------------------------------------------------------------------------
# grad_check and SGD
# ---------------------------------------------------------------------------

def test_grad_check_passes_on_smooth_function_and_rejects_f32():
    rng = np.random.default_rng(4)
    x, w = t64(rng.normal(size=(2, 3, 3))), t64(rng.normal(size=(2, 2)))
    probe = rng.normal(size=(2, 3, 3))
    res = T.grad_check(lambda: T.weighted_sum(T.sigmoid_map(T.conv1x1(x, w)), probe), [x, w])
    assert res.max_rel_error < 1e-5
    with pytest.raises(ContractViolation):
        T.grad_check(lambda: T.sum_all(x), [Tensor(np.ones(2), dtype=np.float32)])


def test_grad_check_detects_wrong_backward(monkeypatch):
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(2, 3, 3)))
    probe = rng.normal(size=(2, 3, 3))
    monkeypatch.setitem(T.BACKWARD, "sigmoid", lambda y, g: (-g * y * (1 - y),))
    res = T.grad_check(lambda: T.weighted_sum(T.sigmoid_map(x), probe), [x])
    assert res.max_rel_error > 1.0
    assert res.worst_param and len(res.worst_index) == 3


def test_sgd_momentum_hand_computed():
    p = t64([1.0, 2.0])
    opt = T.SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0, -1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, 2.1])
    p.grad = np.array([1.0, -1.0])
    opt.step()          # v = 0.5 * 1 + 1 = 1.5
    np.testing.assert_allclose(p.data, [0.75, 2.25])
    assert p.grad is None
    with pytest.raises(ContractViolation):
        opt.step()


def test_sgd_clipping_rescales_joint_norm():
    a, b = t64([3.0]), t64([4.0])
    opt = T.SGD([a, b], lr=1.0, momentum=0.0, clip_norm=1.0)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    opt.step()
    np.testing.assert_allclose([a.data[0], b.data[0]], [3.0 - 0.6, 4.0 - 0.8])
    assert opt.last_grad_norm == pytest.approx(5.0)


def test_sgd_zero_lr_leaves_params_unchanged():
    p = t64([1.0, 2.0])
    p.grad = np.ones(2)
    v = T.sgd_step([p], 0.0, 0.9)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(v[0], [1.0, 1.0])
