"""Invertible building blocks: actnorm, invertible 1x1 mixing, affine coupling,
the 2x2 squeeze and the channel split.

Every layer provides ``forward(x) -> LayerOutput`` carrying the exact
log |det J| for this input, and an exact ``inverse``. Layers accept a single
example (conv: ``(C,H,W)``, dense: ``(D,)``) or a batch with one leading
axis; ``log_det`` is then a scalar tensor or a per-example ``(N,)`` tensor
(constant-Jacobian layers always report a scalar).
"""

import math

import numpy as np

from . import tensor as T
from .errors import (
    ContractError,
    DegenerateInputError,
    ShapeError,
    SingularityError,
    StateError,
)
from .tensor import Parameter, Tensor

MIN_ABS_DET = 1e-12


class LayerOutput:
    __slots__ = ("y", "log_det")

    def __init__(self, y, log_det):
        self.y = y
        self.log_det = log_det


class FlowLayer:
    """Interface shared by all invertible layers."""

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def parameters(self):
        return []


def _spatial_cells(shape, spatial):
    """Number of positions sharing the per-feature parameters."""
    return int(shape[-2] * shape[-1]) if spatial else 1


class ActNorm(FlowLayer):
    """Per-channel affine y = s*x + b with data-dependent initialization.

    ``spatial=True`` treats input as (...,C,H,W) with parameters shared over
    H and W; ``spatial=False`` treats input as (...,D) with one (s,b) pair
    per dimension.
    """

    def __init__(self, num_features, spatial=True, initialized=False):
        self.num_features = num_features
        self.spatial = spatial
        shape = (num_features, 1, 1) if spatial else (num_features,)
        self.log_scale_shape = shape
        self.scale = Parameter(np.ones(shape))
        self.bias = Parameter(np.zeros(shape))
        self.initialized = initialized

    def parameters(self):
        return [self.scale, self.bias]

    def _check_ready(self):
        if not self.initialized:
            raise StateError("ActNorm used before data-dependent initialization")

    def init_from_batch(self, batch):
        """Set s=1/std, b=-mean/std so the batch maps to zero mean, unit variance."""
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        if x.ndim != (4 if self.spatial else 2):
            raise ContractError(f"init batch must be batched, got shape {x.shape}")
        if x.shape[0] < 2:
            raise ContractError("ActNorm init needs at least 2 examples")
        axes = (0, 2, 3) if self.spatial else (0,)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if np.any(var <= 1e-12):
            raise DegenerateInputError("constant channel in ActNorm init batch")
        std = np.sqrt(var)
        self.scale.assign((1.0 / std).reshape(self.log_scale_shape))
        self.bias.assign((-mean / std).reshape(self.log_scale_shape))
        self.initialized = True

    def forward(self, x):
        self._check_ready()
        y = T.add(T.mul(x, self.scale.value), self.bias.value)
        cells = _spatial_cells(x.shape, self.spatial)
        log_det = T.scale(T.tsum(T.log_abs(self.scale.value)), float(cells))
        return LayerOutput(y, log_det)

    def inverse(self, y):
        self._check_ready()
        return T.div(T.sub(y, self.bias.value), self.scale.value)


def random_rotation(n, rng):
    """Orthogonal matrix (|det| = 1, so zero initial log-det contribution)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Invertible1x1(FlowLayer):
    """Channel mixing by a square matrix W, applied per spatial position.

    Conv models use ``spatial=True`` (a true 1x1 convolution); the dense
    variant uses ``spatial=False``, a full linear projection of the
    flattened vector, optionally frozen at its random initialization.
    """

    def __init__(self, num_features, rng, spatial=True, trainable=True):
        self.num_features = num_features
        self.spatial = spatial
        self.weight = Parameter(random_rotation(num_features, rng), trainable=trainable)

    def parameters(self):
        return [self.weight]

    def _checked_logdet(self):
        sign, lad = np.linalg.slogdet(self.weight.value.data)
        if sign == 0.0 or lad <= math.log(MIN_ABS_DET):
            raise SingularityError("1x1 weight is numerically singular")
        return lad

    def _apply(self, x, mat):
        c = self.num_features
        if self.spatial:
            batched = x.ndim == 4
            lead = x.shape[0] if batched else 1
            h, w = x.shape[-2], x.shape[-1]
            perm = (1, 0, 2, 3) if batched else None
            xm = T.reshape(T.transpose(x, perm) if batched else x, (c, lead * h * w))
            ym = T.matmul(mat, xm)
            if batched:
                return T.transpose(T.reshape(ym, (c, lead, h, w)), (1, 0, 2, 3))
            return T.reshape(ym, (c, h, w))
        batched = x.ndim == 2
        xm = x if batched else T.reshape(x, (1, c))
        ym = T.matmul(xm, T.transpose(mat))
        return ym if batched else T.reshape(ym, (c,))

    def forward(self, x):
        self._checked_logdet()
        y = self._apply(x, self.weight.value)
        cells = _spatial_cells(x.shape, self.spatial)
        log_det = T.scale(T.logabsdet(self.weight.value), float(cells))
        return LayerOutput(y, log_det)

    def inverse(self, y):
        self._checked_logdet()
        w_inv = Tensor(np.linalg.inv(self.weight.value.data))
        return self._apply(y, w_inv)


class ConvCouplingNet:
    """conv3x3 -> relu -> conv1x1 -> relu -> conv3x3 (zero-init) producing (t, raw)."""

    def __init__(self, in_channels, out_channels, hidden, rng):
        self.out_channels = out_channels

        def conv_init(o, c, k):
            std = 1.0 / math.sqrt(c * k * k)
            return Parameter(rng.normal(0.0, std, size=(o, c, k, k)))

        self.w1 = conv_init(hidden, in_channels, 3)
        self.b1 = Parameter(np.zeros((hidden, 1, 1)))
        self.w2 = conv_init(hidden, hidden, 1)
        self.b2 = Parameter(np.zeros((hidden, 1, 1)))
        self.w3 = Parameter(np.zeros((2 * out_channels, hidden, 3, 3)))
        self.b3 = Parameter(np.zeros((2 * out_channels, 1, 1)))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def __call__(self, x):
        h = T.relu(T.add(T.conv2d(x, self.w1.value), self.b1.value))
        h = T.relu(T.add(T.conv2d(h, self.w2.value), self.b2.value))
        out = T.add(T.conv2d(h, self.w3.value), self.b3.value)
        ax = out.ndim - 3
        t = T.narrow(out, ax, 0, self.out_channels)
        raw = T.narrow(out, ax, self.out_channels, self.out_channels)
        return t, raw


class DenseCouplingNet:
    """linear -> relu -> linear -> relu -> linear (zero-init) producing (t, raw)."""

    def __init__(self, in_dim, out_dim, hidden, rng):
        self.out_dim = out_dim

        def linear_init(o, i):
            std = 1.0 / math.sqrt(i)
            return Parameter(rng.normal(0.0, std, size=(o, i)))

        self.w1 = linear_init(hidden, in_dim)
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = linear_init(hidden, hidden)
        self.b2 = Parameter(np.zeros(hidden))
        self.w3 = Parameter(np.zeros((2 * out_dim, hidden)))
        self.b3 = Parameter(np.zeros(2 * out_dim))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def __call__(self, x):
        batched = x.ndim == 2
        xm = x if batched else T.reshape(x, (1, x.shape[0]))
        h = T.relu(T.add(T.matmul(xm, T.transpose(self.w1.value)), self.b1.value))
        h = T.relu(T.add(T.matmul(h, T.transpose(self.w2.value)), self.b2.value))
        out = T.add(T.matmul(h, T.transpose(self.w3.value)), self.b3.value)
        if not batched:
            out = T.reshape(out, (2 * self.out_dim,))
        ax = out.ndim - 1
        t = T.narrow(out, ax, 0, self.out_dim)
        raw = T.narrow(out, ax, self.out_dim, self.out_dim)
        return t, raw


class AffineCoupling(FlowLayer):
    """Affine coupling: the first ceil(C/2) features condition, the rest transform.

    The scale is s = sigmoid(raw + 2), keeping s in (0,1) with s = sigmoid(2)
    at the zero-initialized starting point, so a fresh layer is an exact
    elementwise rescaling y2 = sigmoid(2) * x2.
    """

    def __init__(self, num_features, net, spatial=True):
        self.num_features = num_features
        self.spatial = spatial
        self.cond = (num_features + 1) // 2
        self.trans = num_features - self.cond
        if self.trans < 1:
            raise ContractError("coupling needs at least 2 features")
        self.net = net

    def parameters(self):
        return self.net.parameters()

    def _axis(self, x):
        return x.ndim - 3 if self.spatial else x.ndim - 1

    def _per_example_axes(self, t, batched):
        return tuple(range(1, t.ndim)) if batched else None

    def forward(self, x):
        ax = self._axis(x)
        x1 = T.narrow(x, ax, 0, self.cond)
        x2 = T.narrow(x, ax, self.cond, self.trans)
        t, raw = self.net(x1)
        u = T.shift(raw, 2.0)
        s = T.sigmoid(u)
        y2 = T.add(T.mul(x2, s), t)
        y = T.concat([x1, y2], ax)
        batched = x.ndim == (4 if self.spatial else 2)
        log_s = T.log_sigmoid(u)
        log_det = T.tsum(log_s, axis=self._per_example_axes(log_s, batched))
        return LayerOutput(y, log_det)

    def inverse(self, y):
        ax = self._axis(y)
        y1 = T.narrow(y, ax, 0, self.cond)
        y2 = T.narrow(y, ax, self.cond, self.trans)
        t, raw = self.net(y1)
        s = T.sigmoid(T.shift(raw, 2.0))
        x2 = T.div(T.sub(y2, t), s)
        return T.concat([y1, x2], ax)


class Squeeze(FlowLayer):
    """Volume-preserving 2x2 space-to-channel reshuffle (log_det identically 0)."""

    def forward(self, x):
        return LayerOutput(T.squeeze2(x), Tensor(0.0))

    def inverse(self, y):
        return T.unsqueeze2(y)


class Split:
    """Channel partition into a carried half and an emitted latent half.

    The first half continues through the network, the second half exits as
    this scale's latent. Merging the parts back is bit-exact; the Jacobian
    is a permutation (log_det = 0).
    """

    def __init__(self, num_features, spatial=True):
        if num_features % 2:
            raise ShapeError("split requires an even feature count")
        self.num_features = num_features
        self.spatial = spatial
        self.log_det = 0.0

    def _axis(self, x):
        return x.ndim - 3 if self.spatial else x.ndim - 1

    def apply(self, x):
        ax = self._axis(x)
        half = self.num_features // 2
        return T.narrow(x, ax, 0, half), T.narrow(x, ax, half, half)

    def merge(self, h, z):
        return T.concat([h, z], self._axis(h))
