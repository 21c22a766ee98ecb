"""Layer composition, the toy base net / auxiliary layers, and net splitting.

A ``LayerNet`` is the composition f_L o ... o f_1. ``split_network`` cuts it
into a pre-model (f_1..f_l) and post-model (f_{l+1}..f_L) that share the
original layer objects, so no weights are copied.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor


class Conv2d:
    """Convolution with an optional fused ReLU (a "conv block")."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, k=3, stride=1, padding=1, relu=True, rng=None):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding, self.relu = stride, padding, relu
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = T.he_uniform(rng, (out_ch, in_ch, k, k), fan_in=in_ch * k * k)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ValidationError(f"conv expects {self.in_ch} input channels, got shape {tuple(in_shape)}")
        ho = T.conv_output_size(h, self.k, self.stride, self.padding)
        wo = T.conv_output_size(w, self.k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ValidationError(f"conv kernel {self.k} does not fit input {tuple(in_shape)}")
        return (self.out_ch, ho, wo)

    def __call__(self, x):
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        return T.relu(y) if self.relu else y

    def parameters(self):
        return [self.weight, self.bias]

    def spec(self):
        return {"kind": "conv", "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k,
                "stride": self.stride, "padding": self.padding, "relu": self.relu}


class MaxPool2d:
    kind = "maxpool"

    def __init__(self, k=2, stride=None):
        self.k = k
        self.stride = k if stride is None else stride

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.k > h or self.k > w:
            raise ValidationError(f"maxpool window {self.k} is empty on input {tuple(in_shape)}")
        return (c, (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1)

    def __call__(self, x):
        return T.maxpool2d(x, self.k, self.stride)

    def parameters(self):
        return []

    def spec(self):
        return {"kind": "maxpool", "k": self.k, "stride": self.stride}


class Flatten:
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x):
        return T.flatten(x, 1)

    def parameters(self):
        return []

    def spec(self):
        return {"kind": "flatten"}


class Linear:
    kind = "linear"

    def __init__(self, in_features, out_features, relu=False, rng=None, bias=True):
        self.in_features, self.out_features, self.relu = in_features, out_features, relu
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = T.he_uniform(rng, (out_features, in_features), fan_in=in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ValidationError(f"linear expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def __call__(self, x):
        y = T.linear(x, self.weight, self.bias)
        return T.relu(y) if self.relu else y

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def spec(self):
        return {"kind": "linear", "in_features": self.in_features,
                "out_features": self.out_features, "relu": self.relu, "bias": self.bias is not None}


def layer_from_spec(spec):
    kind = spec["kind"]
    if kind == "conv":
        return Conv2d(spec["in_ch"], spec["out_ch"], spec["k"], spec["stride"],
                      spec["padding"], spec["relu"])
    if kind == "maxpool":
        return MaxPool2d(spec["k"], spec["stride"])
    if kind == "flatten":
        return Flatten()
    if kind == "linear":
        return Linear(spec["in_features"], spec["out_features"], spec["relu"], bias=spec["bias"])
    raise ValidationError(f"unknown layer kind {kind!r}")


class LayerNet:
    """Ordered composition of layers with shapes checked at construction."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shapes = [self.input_shape]
        for j, layer in enumerate(self.layers, start=1):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ValidationError as exc:
                raise ValidationError(f"layer {j} ({layer.kind}): {exc}") from None
        self.shapes = shapes

    def __len__(self):
        return len(self.layers)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == len(self.input_shape)
        if single:
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValidationError(f"input shape {tuple(x.shape[1:])} != expected {self.input_shape}")
        for layer in self.layers:
            x = layer(x)
        return x.reshape(x.shape[1:]) if single else x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def spec(self):
        return {"input_shape": list(self.input_shape), "layers": [l.spec() for l in self.layers]}

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


@dataclass
class SplitNet:
    pre: LayerNet
    post: LayerNet
    cut_index: int

    def forward(self, x):
        return self.post(self.pre(x))


def split_network(net, cut):
    """Cut ``net`` after layer ``cut`` (1-based): pre = f_1..f_cut, post = the rest."""
    n = len(net)
    if not isinstance(cut, (int, np.integer)) or not 1 <= cut <= n - 1:
        raise ValidationError(f"cut-off index {cut} outside valid range [1, {n - 1}] for a {n}-layer net")
    pre = LayerNet(net.layers[:cut], net.input_shape)
    post = LayerNet(net.layers[cut:], net.shapes[cut])
    return SplitNet(pre, post, int(cut))


def forward_pre(split, x0):
    """The cut-off layer activation x^(l); spatial shape is kept."""
    return split.pre(x0)


# toy architecture: 6 conv blocks, two 2x2 max pools, input 3x64x64
BASENET_INPUT = (3, 64, 64)
BASENET_LAYOUT = (
    ("conv", 3, 16, 1),
    ("pool",),
    ("conv", 16, 32, 1),
    ("conv", 32, 32, 1),
    ("pool",),
    ("conv", 32, 32, 1),   # block 4
    ("conv", 32, 64, 2),
    ("conv", 64, 64, 1),
)
BASENET_SHAPES = [(3, 64, 64), (16, 64, 64), (16, 32, 32), (32, 32, 32), (32, 32, 32),
                  (32, 16, 16), (32, 16, 16), (64, 8, 8), (64, 8, 8)]
# layer index right after conv block 4
DEFAULT_CUT = 6

AUX_LAYOUT = (
    (64, 128, 2, 1),   # 8x8 -> 4x4
    (128, 128, 1, 0),  # 4x4 -> 2x2
)


def build_toy_basenet(seed):
    rng = np.random.default_rng(seed)
    layers = []
    for entry in BASENET_LAYOUT:
        if entry[0] == "pool":
            layers.append(MaxPool2d(2))
        else:
            _, cin, cout, stride = entry
            layers.append(Conv2d(cin, cout, 3, stride, 1, relu=True, rng=rng))
    return LayerNet(layers, BASENET_INPUT)


def build_auxlayers(in_shape, seed):
    rng = np.random.default_rng([seed, 1])
    layers = [Conv2d(cin, cout, 3, stride, pad, relu=True, rng=rng) for cin, cout, stride, pad in AUX_LAYOUT]
    return LayerNet(layers, in_shape)


def count_parameters(obj, trainable_only=True):
    """Number of trainable scalars in ``obj.parameters()``.

    With ``trainable_only=False`` frozen tensors (e.g. a projection basis or a
    frozen pre-model) are counted too.
    """
    return int(sum(p.size for p in obj.parameters() if p.requires_grad or not trainable_only))


def conv_param_formula(specs):
    """Closed-form sum of F*C*k^2 + F over conv layer specs."""
    return sum(s["out_ch"] * s["in_ch"] * s["k"] ** 2 + s["out_ch"] for s in specs if s["kind"] == "conv")
