import numpy as np
import pytest

from poddet import nets
from poddet.errors import ValidationError
from poddet.nets import Conv2d, LayerNet, MaxPool2d, count_parameters, forward_pre, split_network
from poddet.tensor import Tensor

# recorded from build_toy_basenet(0) on golden_input(): sum, sum of squares, max of x^(6)
GOLDEN_PRE6_STATS = [4544.25196978123, 7285.827797260858, 4.546057971228266]


def golden_input():
    return np.random.default_rng(1234).uniform(0, 1, size=(3, 64, 64))


def small_net(seed=0, n=5):
    rng = np.random.default_rng(seed)
    layers = [Conv2d(2, 3, rng=rng), Conv2d(3, 3, rng=rng), MaxPool2d(2), Conv2d(3, 4, rng=rng),
              Conv2d(4, 2, stride=2, rng=rng)][:n]
    return LayerNet(layers, (2, 8, 8))


def test_split_layers():
    net = small_net(n=4)
    s = split_network(net, 2)
    assert s.pre.layers == net.layers[:2] and s.post.layers == net.layers[2:]
    assert len(s.pre) == 2 and len(s.post) == 2


def test_split_shares_storage():
    net = small_net()
    s = split_network(net, 3)
    assert all(a is b for a, b in zip(s.pre.parameters() + s.post.parameters(), net.parameters()))


@pytest.mark.parametrize("cut", [1, 2, 3, 4])
def test_split_identity_bit_exact(cut):
    net = small_net()
    x = np.random.default_rng(cut).normal(size=(3, 2, 8, 8))
    s = split_network(net, cut)
    assert s.post(s.pre(x)).data.tobytes() == net(x).data.tobytes()


@pytest.mark.parametrize("cut", [0, 5, -1])
def test_split_out_of_range(cut):
    with pytest.raises(ValidationError, match="range"):
        split_network(small_net(), cut)


def test_forward_pre_single_conv():
    rng = np.random.default_rng(0)
    conv = Conv2d(2, 3, rng=rng)
    net = LayerNet([conv, Conv2d(3, 3, rng=rng)], (2, 8, 8))
    x = rng.normal(size=(2, 8, 8))
    out = forward_pre(split_network(net, 1), x)
    assert out.data.tobytes() == conv(Tensor(x[None])).data[0].tobytes()


def test_forward_pre_identity_kernel():
    conv = Conv2d(1, 1, relu=False)
    conv.weight.data = np.zeros((1, 1, 3, 3))
    conv.weight.data[0, 0, 1, 1] = 1.0
    net = LayerNet([conv, Conv2d(1, 1)], (1, 5, 5))
    x = np.random.default_rng(2).normal(size=(1, 5, 5))
    assert np.array_equal(forward_pre(split_network(net, 1), x).data, x)


def test_forward_pre_shape_mismatch():
    with pytest.raises(ValidationError):
        forward_pre(split_network(small_net(), 2), np.zeros((3, 8, 8)))


def test_layernet_rejects_bad_chain():
    with pytest.raises(ValidationError, match="layer 2"):
        LayerNet([Conv2d(2, 3), Conv2d(4, 2)], (2, 8, 8))


def test_toy_basenet_deterministic():
    a, b = nets.build_toy_basenet(0), nets.build_toy_basenet(0)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    c = nets.build_toy_basenet(1)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_toy_basenet_declared_shapes():
    net = nets.build_toy_basenet(0)
    assert net.shapes == nets.BASENET_SHAPES
    assert len([l for l in net.layers if l.kind == "conv"]) == 6
    assert len([l for l in net.layers if l.kind == "maxpool"]) == 2
    assert net(golden_input()).shape == nets.BASENET_SHAPES[-1]


def test_toy_basenet_param_formula():
    net = nets.build_toy_basenet(0)
    # hand evaluation of sum F*C*9 + F over the six convs
    by_hand = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (32 * 32 * 9 + 32) \
        + (64 * 32 * 9 + 64) + (64 * 64 * 9 + 64)
    assert count_parameters(net) == by_hand == nets.conv_param_formula([l.spec() for l in net.layers])


def test_count_parameters_examples():
    assert count_parameters(LayerNet([Conv2d(3, 8, 3)], (3, 8, 8))) == 224
    assert count_parameters(LayerNet([], (3, 8, 8))) == 0


def test_count_parameters_split_additive():
    net = nets.build_toy_basenet(0)
    for cut in range(1, len(net)):
        s = split_network(net, cut)
        assert count_parameters(s.pre) + count_parameters(s.post) == count_parameters(net)


def test_toy_basenet_golden_activation():
    net = nets.build_toy_basenet(0)
    x_l = forward_pre(split_network(net, nets.DEFAULT_CUT), golden_input()).data
    assert x_l.shape == (32, 16, 16)
    np.testing.assert_allclose([x_l.sum(), (x_l ** 2).sum(), x_l.max()], GOLDEN_PRE6_STATS, rtol=1e-12)

