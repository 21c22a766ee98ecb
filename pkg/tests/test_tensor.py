import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poddet import tensor as T
from poddet.errors import ValidationError
from poddet.tensor import Tensor

from oracles import finite_difference, naive_conv2d, rel_error


def test_conv_1x1_kernel_scales():
    x = Tensor(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    assert np.array_equal(y.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 1, 3, 3)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    y = T.conv2d(x, Tensor(k), Tensor(np.zeros(1)), padding=1)
    assert np.array_equal(y.data, x.data)


def test_conv_stride2_pad1_matches_loops():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    assert y.shape == (1, 3, 2, 2)
    np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, 2, 1), atol=1e-10, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(3, 8), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_conv_matches_loops_property(n, c, f, hw, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(n, c, hw, hw)), rng.normal(size=(f, c, k, k)), rng.normal(size=f)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, stride, pad), atol=1e-10, rtol=0)


def test_conv_channel_mismatch_reports_dims():
    with pytest.raises(ValidationError, match="C=2.*C=3"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ValidationError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_relu_pool_softmax_basics():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    y = T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    assert y.data.reshape(-1).tolist() == [4.0]
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_maxpool_empty_window_rejected():
    with pytest.raises(ValidationError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 1, 1))), 2)


def test_maxpool_tie_goes_to_lowest_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.maxpool2d(x, 2).sum())
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_backward_linear_function():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.array([0.5, 0.1, -0.3]), requires_grad=True)
    T.backward((w * Tensor(x)).sum())
    assert np.array_equal(w.grad, x)


def test_backward_relu():
    w = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    T.backward(T.relu(w).sum())
    assert w.grad.tolist() == [0.0, 1.0]


def test_backward_detached_scalar_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        T.backward(Tensor(3.0))
    assert caught


def test_tape_cleared_after_backward():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = (w * 2.0).sum()
    assert T.tape_length() > 0
    T.backward(loss)
    assert T.tape_length() == 0


def test_small_net_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    w1 = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(4, 27)) * 0.3, requires_grad=True)
    b2 = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    targets = np.array([1, 3])

    def loss_fn():
        h = T.maxpool2d(T.relu(T.conv2d(x, w1, b1, padding=1)), 2)
        return T.cross_entropy(T.linear(T.flatten(h), w2, b2), targets)

    T.backward(loss_fn())
    for p in (w1, b1, w2, b2):
        with T.no_grad():
            num = finite_difference(lambda: loss_fn().item(), p.data)
        assert rel_error(p.grad, num) < 1e-4


def test_sgd_plain_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    T.sgd_step([p], lr=0.1, momentum=0.0)
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad[0] == 0.0


def test_sgd_momentum_two_steps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = T.SGD([p], lr=0.1, momentum=0.9)
    for expected in (0.9, 0.71):
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(expected, abs=1e-12)


def test_sgd_zero_grad_leaves_param():
    p = Tensor(np.array([1.5]), requires_grad=True)
    p.grad = np.zeros(1)
    T.sgd_step([p], lr=0.1, momentum=0.9)
    assert p.data[0] == 1.5


def test_sgd_rejects_nonpositive_lr():
    with pytest.raises(ValidationError):
        T.sgd_step([Tensor(np.ones(1), requires_grad=True)], lr=0.0)


def test_forward_bit_identical():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6))
def test_ops_stay_finite(values):
    x = Tensor(np.array(values), requires_grad=True)
    y = T.softmax(x.reshape((1, -1)))
    z = T.log_softmax(x.reshape((1, -1)))
    T.backward((y * z).sum())
    assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(z.data)) and np.all(np.isfinite(x.grad))
