"""Dense float64 tensors with reverse-mode automatic differentiation.

A small primitive set (pointwise ops, matmul, same-padded conv2d,
reductions and reshuffles) is recorded on an explicit :class:`Tape`;
:func:`backward` replays the tape once in reverse and accumulates
gradients into every :class:`Parameter` that participated.

Conventions:

* everything is 64-bit, row-major;
* binary ops broadcast with trailing-dimension (numpy) alignment only;
* tensors are value-like: primitives never mutate their inputs;
* gradients accumulate across backward calls until explicitly reset.
"""

import numpy as np

from . import kernels
from .errors import ContractError, DomainError, ShapeError, SingularityError


class Tensor:
    """Dense n-dimensional float64 array, the carrier for all numeric state."""

    __slots__ = ("data", "param")

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.param = None

    @classmethod
    def _wrap(cls, arr):
        """Wrap a freshly computed ndarray without copying."""
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.param = None
        return t

    @classmethod
    def zeros(cls, shape):
        return cls._wrap(np.zeros(shape, dtype=np.float64))

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
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # operator sugar; scalar operands use the scale/shift primitives
    def __add__(self, other):
        return shift(self, other) if isinstance(other, (int, float)) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return scale(tsum(self, axis=axis), 1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter:
    """A trainable tensor plus its accumulated gradient."""

    __slots__ = ("_value", "gradient", "trainable")

    def __init__(self, value, trainable=True):
        v = value if isinstance(value, Tensor) else Tensor(value)
        v.param = self
        self._value = v
        self.gradient = Tensor.zeros(v.shape)
        self.trainable = trainable

    @property
    def value(self):
        return self._value

    def assign(self, arr):
        """Replace the value in place (optimizer update path)."""
        a = np.asarray(arr, dtype=np.float64)
        if a.shape != self._value.shape:
            raise ShapeError(f"assign shape {a.shape} != parameter shape {self._value.shape}")
        v = Tensor._wrap(a.copy())
        v.param = self
        self._value = v

    def reset_gradient(self):
        self.gradient = Tensor.zeros(self._value.shape)


class _Node:
    __slots__ = ("out", "inputs", "backfn")

    def __init__(self, out, inputs, backfn):
        self.out = out
        self.inputs = inputs
        self.backfn = backfn


_TAPE_STACK = []


class Tape:
    """Ordered record of the primitive operations applied under it.

    Nodes are appended in execution order, so the list is already
    topologically sorted; :func:`backward` walks it once in reverse.

    With ``track_params=False`` parameters are treated as constants and only
    explicitly watched tensors receive gradients (latent-optimization mode).
    """

    def __init__(self, track_params=True):
        self._track_params = track_params
        self._nodes = []
        self._watched = set()  # ids of tensors participating in gradient flow
        self._user_watched = []  # tensors explicitly watch()ed
        self._leaf_params = {}  # id(value tensor) -> Parameter
        self._grads = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def watch(self, tensor):
        """Request gradients w.r.t. ``tensor`` (a leaf of the computation)."""
        self._user_watched.append(tensor)
        self._watched.add(id(tensor))

    def grad(self, tensor):
        """Gradient of the last backward() root w.r.t. a watched tensor."""
        g = self._grads.get(id(tensor))
        return None if g is None else Tensor._wrap(g.copy())

    def __len__(self):
        return len(self._nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _trace(inputs, out, backfn):
    tape = _active_tape()
    if tape is None:
        return
    tracked = False
    for t in inputs:
        if t.param is not None and tape._track_params:
            tape._leaf_params[id(t)] = t.param
            tracked = True
        elif id(t) in tape._watched:
            tracked = True
    if tracked:
        tape._nodes.append(_Node(out, inputs, backfn))
        tape._watched.add(id(out))


def backward(tape, root):
    """Accumulate d(root)/d(param) into every parameter recorded on ``tape``.

    ``root`` must be a scalar tensor reachable from the tape's nodes.
    Gradients for explicitly watched tensors are retrievable afterwards
    through :meth:`Tape.grad`. Parameter gradients add to whatever the
    parameter already held; reset is the caller's responsibility.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads = {id(root): np.ones(root.shape, dtype=np.float64)}
    keep = {id(t) for t in tape._user_watched}
    final = {}
    for node in reversed(tape._nodes):
        oid = id(node.out)
        g = grads.pop(oid, None)
        if g is None:
            continue
        if oid in keep:
            final[oid] = g
        for t, gi in zip(node.inputs, node.backfn(g)):
            if gi is None:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    for tid, g in grads.items():
        if tid in keep:
            final[tid] = g
    tape._grads = final
    for tid, p in tape._leaf_params.items():
        g = grads.get(tid)
        if g is not None:
            p.gradient.data += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, back_a, back_b):
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from e
    out = Tensor._wrap(out_data)
    sa, sb = a.shape, b.shape

    def backfn(g):
        return (_unbroadcast(back_a(g), sa), _unbroadcast(back_b(g), sb))

    _trace((a, b), out, backfn)
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    return _binary(
        a, b, np.divide, lambda g: g / b.data, lambda g: -g * a.data / (b.data * b.data)
    )


def _unary(a, out_data, back):
    out = Tensor._wrap(out_data)
    _trace((a,), out, lambda g: (back(g),))
    return out


def neg(a):
    return _unary(a, -a.data, lambda g: -g)


def scale(a, c):
    c = float(c)
    return _unary(a, a.data * c, lambda g: g * c)


def shift(a, c):
    c = float(c)
    return _unary(a, a.data + c, lambda g: g)


def exp(a):
    y = np.exp(a.data)
    return _unary(a, y, lambda g: g * y)


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def log_abs(a):
    """Pointwise ln|x|; gradient 1/x."""
    if np.any(a.data == 0.0):
        raise DomainError("log_abs undefined at 0")
    return _unary(a, np.log(np.abs(a.data)), lambda g: g / a.data)


def tanh(a):
    y = np.tanh(a.data)
    return _unary(a, y, lambda g: g * (1.0 - y * y))


def relu(a):
    return _unary(a, np.maximum(a.data, 0.0), lambda g: g * (a.data > 0.0))


def _expit(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    y = _expit(a.data)
    return _unary(a, y, lambda g: g * y * (1.0 - y))


def log_sigmoid(a):
    """ln sigma(x), computed without overflow; gradient sigma(-x)."""
    x = a.data
    y = np.where(x > 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
    return _unary(a, y, lambda g: g * _expit(-x))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor._wrap(kernels.matmul(a.data, b.data))

    def backfn(g):
        ga = kernels.matmul(np.ascontiguousarray(g), np.ascontiguousarray(b.data.T))
        gb = kernels.matmul(np.ascontiguousarray(a.data.T), np.ascontiguousarray(g))
        return (ga, gb)

    _trace((a, b), out, backfn)
    return out


def conv2d(x, w):
    """Same-padded cross-correlation; x is (C,H,W) or (N,C,H,W), w is (O,C,kh,kw)."""
    if w.ndim != 4:
        raise ShapeError(f"conv kernel must be 4-d, got {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("conv2d kernel sides must be odd")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ShapeError(f"conv input must be 3-d or 4-d, got {x.shape}")
    xc = x.data if batched else x.data[None]
    if xc.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {xc.shape[1]}, kernel {w.shape[1]}")
    y = kernels.conv2d(xc, w.data)
    out = Tensor._wrap(y if batched else y[0])

    def backfn(g):
        g4 = np.ascontiguousarray(g if batched else g[None])
        gx = kernels.conv2d_grad_input(g4, w.data)
        gw = kernels.conv2d_grad_weight(g4, xc, kh, kw)
        return (gx if batched else gx[0], gw)

    _trace((x, w), out, backfn)
    return out


def tsum(a, axis=None, keepdims=False):
    if axis is None:
        out = Tensor._wrap(np.asarray(a.data.sum(keepdims=keepdims)))

        def backfn(g):
            return (np.broadcast_to(g.reshape(() if not keepdims else g.shape), a.shape).copy(),)

    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        out = Tensor._wrap(a.data.sum(axis=ax, keepdims=keepdims))

        def backfn(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, a.shape).copy(),)

    _trace((a,), out, backfn)
    return out


def reshape(a, shape):
    out = Tensor._wrap(a.data.reshape(shape))
    old = a.shape
    _trace((a,), out, lambda g: (g.reshape(old),))
    return out


def transpose(a, axes=None):
    out = Tensor._wrap(a.data.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    _trace((a,), out, lambda g: (g.transpose(inv),))
    return out


def concat(parts, axis):
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backfn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    _trace(tuple(parts), out, backfn)
    return out


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor._wrap(a.data[idx].copy())

    def backfn(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    _trace((a,), out, backfn)
    return out


def gather_rows(a, indices):
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor._wrap(a.data[idx].copy())

    def backfn(g):
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    _trace((a,), out, backfn)
    return out


def _squeeze_fwd(x):
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    y = x.reshape(lead + (c, h // 2, 2, w // 2, 2))
    order = tuple(range(len(lead))) + tuple(len(lead) + i for i in (0, 2, 4, 1, 3))
    return np.ascontiguousarray(y.transpose(order)).reshape(lead + (4 * c, h // 2, w // 2))


def _unsqueeze_fwd(y):
    c4, h2, w2 = y.shape[-3:]
    lead = y.shape[:-3]
    c = c4 // 4
    x = y.reshape(lead + (c, 2, 2, h2, w2))
    order = tuple(range(len(lead))) + tuple(len(lead) + i for i in (0, 3, 1, 4, 2))
    return np.ascontiguousarray(x.transpose(order)).reshape(lead + (c, 2 * h2, 2 * w2))


def squeeze2(a):
    """Channel-major 2x2 space-to-channel reshuffle: (...,C,H,W) -> (...,4C,H/2,W/2)."""
    c, h, w = a.shape[-3:]
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze2 requires even spatial sides, got {a.shape}")
    out = Tensor._wrap(_squeeze_fwd(a.data))
    _trace((a,), out, lambda g: (_unsqueeze_fwd(g),))
    return out


def unsqueeze2(a):
    """Exact inverse of :func:`squeeze2`."""
    if a.shape[-3] % 4:
        raise ShapeError(f"unsqueeze2 requires channels divisible by 4, got {a.shape}")
    out = Tensor._wrap(_unsqueeze_fwd(a.data))
    _trace((a,), out, lambda g: (_squeeze_fwd(g),))
    return out


def logabsdet(w):
    """ln |det W| of a square matrix, differentiable w.r.t. W."""
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"logabsdet requires a square matrix, got {w.shape}")
    sign, lad = np.linalg.slogdet(w.data)
    if sign == 0.0 or not np.isfinite(lad):
        raise SingularityError("matrix is numerically singular")
    out = Tensor._wrap(np.asarray(lad))
    _trace((w,), out, lambda g: (np.asarray(g).item() * np.linalg.inv(w.data).T,))
    return out


def detach(a):
    """Copy of ``a`` cut off from gradient flow."""
    return Tensor._wrap(a.data.copy())


_UNARY_KINDS = {
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "neg": neg,
}
_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind, a, b=None):
    """Dispatch a pointwise operation by name.

    ``op_kind`` is one of add/sub/mul/div (binary), exp/log/tanh/relu/
    sigmoid/neg (unary) or ``scale-by-constant`` with ``b`` a python float.
    """
    if op_kind == "scale-by-constant":
        return scale(a, b)
    if op_kind in _BINARY_KINDS:
        if b is None:
            raise ContractError(f"{op_kind} requires two operands")
        return _BINARY_KINDS[op_kind](a, b)
    if op_kind in _UNARY_KINDS:
        return _UNARY_KINDS[op_kind](a)
    raise ContractError(f"unknown op_kind {op_kind!r}")
