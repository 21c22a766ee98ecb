"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that sees at least one ``requires_grad`` input appends a record to a
thread-local tape. ``backward`` replays the tape in reverse, accumulates
gradients into leaf tensors and clears the tape.

Kernels are plain numpy (im2col convolution, window-view pooling); they aim
at correctness and determinism, not speed.
"""

import contextlib
import threading
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

_state = threading.local()


class _Record:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out, parents, fn):
        self.out = out
        self.parents = parents
        self.fn = fn


def _tape():
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def clear_tape():
    _tape().clear()


def tape_length():
    return len(_tape())


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return tsum(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, fn):
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.is_leaf = False
        _tape().append(_Record(out, parents, fn))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss):
    """Reverse-mode sweep from a scalar ``loss``; clears the tape afterwards."""
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if not loss.requires_grad:
        warnings.warn("backward() on a tensor that is not connected to the tape; nothing to do")
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if not any(rec.out is loss for rec in tape):
        warnings.warn("backward() on a tensor whose tape was already consumed; nothing to do")
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for p, pg in zip(rec.parents, rec.fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.is_leaf:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    tape.clear()


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), fn)


def reciprocal(a):
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    # np.maximum keeps NaN so divergence is not masked
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def smooth_l1(a):
    """Elementwise Huber loss with unit threshold: 0.5 x^2 if |x| < 1 else |x| - 0.5."""
    x = a.data
    small = np.abs(x) < 1.0
    out = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    return _record(out, (a,), lambda g: (g * np.where(small, x, np.sign(x)),))


# -- shape / reduction ----------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), fn)


def reshape(a, shape):
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def flatten(a, start=1):
    """Collapse every axis from ``start`` onwards (row-major)."""
    return reshape(a, a.shape[:start] + (-1,))


def getitem(a, idx):
    if isinstance(idx, np.ndarray) and idx.dtype == bool:
        idx = np.nonzero(idx)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), fn)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for x of shape [N, in], weight [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValidationError(
            f"linear: input {x.shape} does not match weight {weight.shape} (in_features)")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = parents + (bias,)

    def fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record(out, parents, fn)


# -- softmax family -----------------------------------------------------------------

def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), fn)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), fn)


def cross_entropy(logits, targets):
    """Mean cross-entropy of [N, K] logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(targets)), targets))
    return -tsum(picked) * (1.0 / len(targets))


# -- convolution and pooling --------------------------------------------------------

def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp_nhwc, k, stride):
    # rows ordered (n, i, j), columns ordered (ki, kj, c)
    n, c = xp_nhwc.shape[0], xp_nhwc.shape[3]
    win = sliding_window_view(xp_nhwc, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, input [N,C,H,W], weight [F,C,k,k] -> [N,F,H',W']."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValidationError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if cw != c:
        raise ValidationError(
            f"conv2d channel mismatch: input has C={c} (shape {x.shape}), "
            f"weight expects C={cw} (shape {weight.shape})")
    if k != k2:
        raise ValidationError(f"conv2d needs square kernels, got {k}x{k2}")
    if stride < 1:
        raise ValidationError(f"conv2d stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValidationError(f"conv2d kernel {k} larger than padded input {h}x{w} (padding {padding})")

    xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols, ho, wo = _im2col(xh, k, stride)
    wm = weight.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, k, k, c)
            dxh = np.zeros(xh.shape)
            for i in range(k):
                for j in range(k):
                    dxh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxh = dxh[:, padding:padding + h, padding:padding + w, :]
            gx = np.ascontiguousarray(dxh.transpose(0, 3, 1, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, fn)


def maxpool2d(x, k=2, stride=None):
    """Max pooling; gradient goes to the first (lowest linear index) maximum."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ValidationError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or stride < 1 or k > h or k > w:
        raise ValidationError(f"maxpool2d window {k} (stride {stride}) is empty on a {h}x{w} input")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    if k == stride:
        # non-overlapping windows: a reshape is enough
        flat = (x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k))
    else:
        win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gx = np.zeros_like(x.data)
        if k == stride:
            gx[ni, ci, rows, cols] = g
        else:
            np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return _record(out, (x,), fn)


# -- initialisation and optimisation --------------------------------------------------

def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def sgd_step(params, lr, momentum=0.0, velocity=None):
    """One SGD step with heavy-ball momentum, v <- g + momentum * v, p <- p - lr * v.

    ``velocity`` maps parameter position to its momentum buffer; pass the same
    dict on every call to carry momentum across steps. Gradients are zeroed
    afterwards. Returns the velocity dict.
    """
    if lr <= 0:
        raise ValidationError(f"learning rate must be > 0, got {lr}")
    velocity = {} if velocity is None else velocity
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity.get(i)
        v = g.copy() if v is None else g + momentum * v
        velocity[i] = v
        p.data = p.data - lr * v
        p.grad = np.zeros_like(p.data)
    return velocity


class SGD:
    def __init__(self, params, lr, momentum=0.0):
        if lr <= 0:
            raise ValidationError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.velocity)
