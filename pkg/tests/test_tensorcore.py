import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcgurklab import tensorcore as tc
from mcgurklab.tensorcore import Tensor, grad_check


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv1d(x, kernel, stride):
    width, cin, cout = kernel.shape
    t_out = (x.shape[0] - width) // stride + 1
    out = np.zeros((t_out, cout))
    for t in range(t_out):
        for o in range(cout):
            total = 0.0
            for w in range(width):
                for c in range(cin):
                    total += x[t * stride + w, c] * kernel[w, c, o]
            out[t, o] = total
    return out


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = tc.tensor(np.eye(2))
    b = tc.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tc.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert tc.matmul(tc.tensor([[1.0, 2.0]]), tc.tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(tc.matmul(tc.tensor(a), tc.tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(tc.DimensionError):
        tc.matmul(tc.tensor(np.ones((2, 3))), tc.tensor(np.ones((2, 3))))


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    g = rng.normal(size=(3, 2))
    tc.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# ---------------------------------------------------------------- conv1d


def test_conv1d_ones():
    x = tc.tensor(np.ones((4, 1)))
    k = tc.tensor(np.ones((2, 1, 1)))
    assert tc.conv1d(x, k, 1).data[:, 0].tolist() == [2.0, 2.0, 2.0]
    assert tc.conv1d(x, k, 2).data[:, 0].tolist() == [2.0, 2.0]


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_matches_sliding_window(stride):
    rng = np.random.default_rng(stride)
    x, k = rng.normal(size=(11, 3)), rng.normal(size=(4, 3, 2))
    got = tc.conv1d(tc.tensor(x), tc.tensor(k), stride).data
    np.testing.assert_allclose(got, naive_conv1d(x, k, stride), atol=1e-12, rtol=0)


def test_conv1d_too_short():
    with pytest.raises(tc.InsufficientLengthError):
        tc.conv1d(tc.tensor(np.ones((2, 1))), tc.tensor(np.ones((3, 1, 1))), 1)


# ---------------------------------------------------------------- elementwise


def test_softmax_uniform():
    np.testing.assert_allclose(tc.softmax(tc.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    out = tc.layer_norm(tc.tensor(rng.normal(3.0, 5.0, size=(6, 16))), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_relu_values():
    assert tc.relu(tc.tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]


def test_log_of_nonpositive_raises():
    with pytest.raises(tc.NumericError):
        tc.log(tc.tensor([1.0, 0.0]))


def test_non_finite_forward_raises():
    with pytest.raises(tc.NumericError):
        tc.exp(tc.tensor([1e5]))


# ---------------------------------------------------------------- attention


def _block_setup(seed, steps, dim=8, heads=2):
    rng = np.random.default_rng(seed)
    params = tc.init_attention_params(dim, heads, 2, rng)
    for k, v in params.items():
        v.data = v.data + rng.normal(0, 0.1, v.shape)
    return rng, params


def test_attention_single_step_weight_is_one():
    rng, params = _block_setup(0, 1)
    _, w = tc.attention_block(tc.tensor(rng.normal(size=(1, 8))), params, 2, causal=False, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((2, 1, 1)))


def test_attention_rows_sum_to_one():
    rng, params = _block_setup(1, 7)
    _, w = tc.attention_block(tc.tensor(rng.normal(size=(7, 8))), params, 2, causal=False, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_causal_mask_blocks_future():
    rng, params = _block_setup(2, 6)
    x = rng.normal(size=(6, 8))
    base = tc.attention_block(tc.tensor(x), params, 2, causal=True).data
    x2 = x.copy()
    x2[4:] += rng.normal(size=(2, 8))
    out = tc.attention_block(tc.tensor(x2), params, 2, causal=True).data
    np.testing.assert_array_equal(out[:4], base[:4])
    assert not np.allclose(out[4:], base[4:])


def test_attention_head_divisibility():
    rng = np.random.default_rng(0)
    with pytest.raises(tc.DimensionError):
        tc.init_attention_params(10, 4, 2, rng)


# ---------------------------------------------------------------- autograd machinery


def test_grad_check_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    err = grad_check(lambda: tc.tsum(tc.mul(x, x)), [x], eps=1e-6)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert err < 1e-8


def test_grad_check_linear_exact():
    rng = np.random.default_rng(3)
    x = param(rng, 5)
    c = rng.normal(size=5)
    assert grad_check(lambda: tc.tsum(tc.mul(x, tc.tensor(c))), [x], eps=1e-5) < 1e-9


def test_gradient_accumulates_over_consumers():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = tc.add(tc.mul(x, x), tc.scale(x, 2.0))
    y.backward()
    assert x.grad.tolist() == [8.0]


def test_backward_seed_is_ones():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    x.backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_forward_bit_identical_across_runs():
    rng, params = _block_setup(4, 5)
    x = rng.normal(size=(3, 5, 8))
    a = tc.attention_block(tc.tensor(x), params, 2, causal=True).data
    b = tc.attention_block(tc.tensor(x), params, 2, causal=True).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- randomized gradient checks

def _weights(rng, *shape):
    return tc.tensor(rng.normal(size=shape))


def _case_matmul(rng, t):
    w = _weights(rng, t, 2)
    return (lambda a, b: tc.tsum(tc.mul(tc.matmul(a, b), w))), [param(rng, t, 3), param(rng, 3, 2)]


def _case_batched_matmul(rng, t):
    return (lambda a, b: tc.tsum(tc.matmul(a, b))), [param(rng, 2, t, 3), param(rng, 2, 3, t)]


def _case_conv1d(rng, t):
    def f(x, k, b):
        y = tc.conv1d(x, k, 2, b)
        return tc.tsum(tc.mul(y, y))

    return f, [param(rng, t + 3, 2), param(rng, 3, 2, 2), param(rng, 2)]


def _case_softmax(rng, t):
    w = _weights(rng, t, 4)
    return (lambda a: tc.tsum(tc.mul(tc.softmax(a), w))), [param(rng, t, 4)]


def _case_log_softmax(rng, t):
    w = _weights(rng, t, 4)
    return (lambda a: tc.tsum(tc.mul(tc.log_softmax(a), w))), [param(rng, t, 4)]


def _case_layer_norm(rng, t):
    w = _weights(rng, t, 5)
    return (lambda a, g, b: tc.tsum(tc.mul(tc.layer_norm(a, g, b), w))), [param(rng, t, 5), param(rng, 5), param(rng, 5)]


def _case_structural(rng, t):
    w = _weights(rng, 4, t)
    return (lambda a, b: tc.tsum(tc.mul(tc.transpose(tc.concat([a, b], axis=-1))[1:, :], w))), [param(rng, t, 2), param(rng, t, 3)]


OPS = {
    "matmul": _case_matmul,
    "batched_matmul": _case_batched_matmul,
    "conv1d": _case_conv1d,
    "add_mul_scale": lambda rng, t: (lambda a, b: tc.tsum(tc.scale(tc.mul(tc.add(a, b), a), 0.7)), [param(rng, t, 3), param(rng, 3)]),
    "sub": lambda rng, t: (lambda a, b: tc.tsum(tc.mul(tc.sub(a, b), tc.sub(a, b))), [param(rng, t, 2), param(rng, t, 2)]),
    "gelu": lambda rng, t: (lambda a: tc.tsum(tc.gelu(a)), [param(rng, t, 3)]),
    "exp_log": lambda rng, t: (lambda a: tc.tsum(tc.log(tc.add(tc.exp(a), tc.tensor(1.0)))), [param(rng, t, 2)]),
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "concat_getitem_transpose": _case_structural,
    "reshape_mean": lambda rng, t: (lambda a: tc.tmean(tc.mul(tc.reshape(a, (t * 3,)), tc.reshape(a, (t * 3,)))), [param(rng, t, 3)]),
}


def _smooth_relu_case(rng, t):
    # keep inputs away from the kink so central differences are valid
    a = param(rng, t, 3)
    a.data = np.where(np.abs(a.data) < 0.1, a.data + 0.3 * np.sign(a.data + 1e-12), a.data)
    return (lambda x: tc.tsum(tc.mul(tc.relu(x), tc.relu(x)))), [a]


OPS["relu"] = _smooth_relu_case


def _attention_case(rng, t, causal):
    params = tc.init_attention_params(8, 2, 2, rng)
    for v in params.values():
        v.data = v.data + rng.normal(0, 0.2, v.shape)
    x = param(rng, t, 8)
    w = tc.tensor(rng.normal(size=(t, 8)))
    return (lambda *_: tc.tsum(tc.mul(tc.attention_block(x, params, 2, causal=causal), w))), [x, *params.values()]


OPS["attention_causal"] = lambda rng, t: _attention_case(rng, t, True)
OPS["attention_full"] = lambda rng, t: _attention_case(rng, t, False)


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), steps=st.integers(1, 5))
def test_randomized_grad_check(name, seed, steps):
    rng = np.random.default_rng(seed)
    f, params = OPS[name](rng, steps)
    assert grad_check(lambda: f(*params), params) < 1e-4
