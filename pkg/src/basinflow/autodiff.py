"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (encoder, graph attention, transformer) is built from
the primitives here. Arrays are numpy, row-major, float32 by default; a
float64 mode exists for finite-difference gradient checks. The tape is
implicit: each result tensor keeps a link to the operation that produced it,
and ``backward`` replays those links in reverse topological order, then
detaches the graph so a tape is never reused.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


_state = {
    "dtype": np.float32,
    "grad": True,
    "check_finite": True,
}


def default_dtype():
    return _state["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG sub-stream so e.g. dropout and data shuffling never collide."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


class _Op:
    __slots__ = ("name", "inputs", "backward_fn")

    def __init__(self, name, inputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        t = Tensor(self.data)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return tensor_slice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out_data, name, inputs, backward_fn):
    if _state["check_finite"] and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{name}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _state["grad"] and any(t.requires_grad for t in inputs)
    out._op = _Op(name, tuple(inputs), backward_fn) if out.requires_grad else None
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish(out, "add", (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _finish(out, "sub", (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _finish(out, "mul", (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _finish(out, "div", (a, b), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _finish(out, "matmul", (a, b), bw)


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return _finish(out, "relu", (x,), bw)


def leaky_relu(x, slope=0.2):
    x = _as_tensor(x)
    out = np.where(x.data > 0, x.data, slope * x.data)

    def bw(g):
        return (g * np.where(x.data > 0, 1.0, slope).astype(g.dtype),)

    return _finish(out, "leaky_relu", (x,), bw)


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _finish(out, "exp", (x,), bw)


def log(x):
    x = _as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _finish(out, "log", (x,), bw)


def sqrt(x):
    x = _as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _finish(out, "sqrt", (x,), bw)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _finish(out, "softmax", (x,), bw)


def tensor_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _finish(np.asarray(out), "sum", (x,), bw)


def tensor_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.data.shape).copy(),)

    return _finish(np.asarray(out), "mean", (x,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, "concat", tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis=axis) for p in parts)

    return _finish(out, "stack", tuple(tensors), bw)


def transpose(x, axes=None):
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _finish(out, "transpose", (x,), bw)


def reshape(x, shape):
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _finish(out, "reshape", (x,), bw)


def tensor_slice(x, idx):
    x = _as_tensor(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _finish(np.asarray(out), "slice", (x,), bw)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout. Identity when not training or rate == 0."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise AutodiffError("dropout in training mode requires an rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _finish(x.data * keep, "dropout", (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = tensor_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tensor_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(_as_tensor(1.0), sqrt(add(var, _as_tensor(eps))))
    return add(mul(mul(xc, inv), gain), bias)


_FORWARD_KINDS = {
    "matmul": lambda inputs, kw: matmul(*inputs),
    "add": lambda inputs, kw: add(*inputs),
    "mul": lambda inputs, kw: mul(*inputs),
    "concat": lambda inputs, kw: concat(inputs, **kw),
    "softmax": lambda inputs, kw: softmax(inputs[0], **kw),
    "relu": lambda inputs, kw: relu(inputs[0]),
    "leaky_relu": lambda inputs, kw: leaky_relu(inputs[0], **kw),
    "mean": lambda inputs, kw: tensor_mean(inputs[0], **kw),
    "layer_norm": lambda inputs, kw: layer_norm(*inputs, **kw),
    "dropout": lambda inputs, kw: dropout(inputs[0], **kw),
    "transpose": lambda inputs, kw: transpose(inputs[0], **kw),
    "slice": lambda inputs, kw: tensor_slice(inputs[0], kw["idx"]),
}


def forward_op(kind, inputs, **kwargs):
    """Dispatch a primitive by name. Unknown kinds raise ShapeError-free KeyError."""
    if kind not in _FORWARD_KINDS:
        raise AutodiffError(f"unknown op kind '{kind}'")
    return _FORWARD_KINDS[kind]([_as_tensor(t) for t in inputs], kwargs)


# ---------------------------------------------------------------------------
# backward pass


class GradientTape:
    """Reverse-topological record of the operations reached from a loss."""

    def __init__(self, ordered_tensors):
        self.ordered = ordered_tensors

    def __len__(self):
        return len(self.ordered)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for parent in node._op.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    order.reverse()  # root first == reverse topological order
    return order


def backward(loss):
    """Accumulate gradients of ``loss`` into every reachable tensor.

    Returns a dict mapping each visited tensor with requires_grad to its
    gradient array. The tape is consumed: op links are cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not require grad; nothing to differentiate")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in order:
        g = grads.get(id(node))
        if g is None or node._op is None:
            continue
        parent_grads = node._op.backward_fn(g)
        for parent, pg in zip(node._op.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
                tensors[id(parent)] = parent

    result = {}
    for key, t in tensors.items():
        t.grad = grads[key] if t.grad is None else t.grad + grads[key]
        result[t] = grads[key]
    for node in order:
        node._op = None  # consume the tape
    return result


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise AutodiffError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue  # unused by this loss -> gradient is zero
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            g = g.astype(p.data.dtype, copy=False)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        """Flat view of moments for checkpointing."""
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        for name in self.params:
            self.m[name] = arrays[f"adam.m.{name}"].copy()
            self.v[name] = arrays[f"adam.v.{name}"].copy()


# ---------------------------------------------------------------------------
# parameter initialization


def glorot(rng, shape):
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)
