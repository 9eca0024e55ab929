"""Multi-scale invertible models and their latent-space operations.

A model is a stack of scales; each scale squeezes 2x2, applies K steps of
(actnorm, 1x1 mixing, affine coupling) and splits off half of its channels
as that scale's latent part. The final scale emits everything. Latent parts
are evaluated independently under the prior, giving the per-scale
log-likelihood contributions

    c_i(x) = log p_z(z_i) + sum of scale i's layer log-determinants,

whose sum is the total log-density. Three variants are provided: the
convolutional model, a fully-connected (dense) one that flattens inside
each scale and keeps its 1x1 projections frozen, and a local-patch model
that treats the image as independent 8x8 patches.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericsError, ShapeError
from .layers import (
    ActNorm,
    AffineCoupling,
    ConvCouplingNet,
    DenseCouplingNet,
    Invertible1x1,
    Split,
    Squeeze,
)
from .tensor import Parameter, Tape, Tensor, backward

LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp(t, axis):
    """Differentiable log-sum-exp with a detached max shift."""
    m = np.max(t.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = T.exp(T.sub(t, Tensor(m)))
    return T.add(T.log(T.tsum(shifted, axis=axis)), Tensor(np.squeeze(m, axis=axis)))


class Prior:
    """Latent prior over the per-scale parts, evaluated independently.

    ``standard_normal`` scores each part under N(0, I). ``gaussian_mixture``
    places one unit-variance mode per class (uniform class weights) over the
    concatenated latent vector; per-scale terms then use the per-scale
    marginal of the mixture, and with a single zero-mean class the mixture
    reduces exactly to the standard normal.
    """

    def __init__(self, latent_dims, kind="standard_normal", num_classes=1):
        if kind not in ("standard_normal", "gaussian_mixture"):
            raise ConfigError(f"unknown prior kind {kind!r}")
        if num_classes < 1:
            raise ConfigError("prior needs at least one class")
        self.kind = kind
        self.latent_dims = list(latent_dims)
        self.total_dim = int(sum(latent_dims))
        self.num_classes = num_classes
        self.offsets = np.cumsum([0] + self.latent_dims).tolist()
        if kind == "gaussian_mixture":
            self.means = Parameter(np.zeros((num_classes, self.total_dim)))
        else:
            self.means = None

    def parameters(self):
        return [self.means] if self.means is not None else []

    def _flat(self, zs):
        return [T.reshape(z, (z.shape[0], int(np.prod(z.shape[1:])))) for z in zs]

    def scale_terms(self, zs):
        """Per-scale prior terms and total joint log p_z; all (N,) tensors."""
        flats = self._flat(zs)
        if self.means is None:
            terms = []
            for z, d in zip(flats, self.latent_dims):
                ssq = T.tsum(T.mul(z, z), axis=1)
                terms.append(T.shift(T.scale(ssq, -0.5), -0.5 * d * LOG_2PI))
            total = terms[0]
            for t in terms[1:]:
                total = T.add(total, t)
            return terms, total
        per_class = self._class_terms(flats)  # list of (N,K)
        logw = -math.log(self.num_classes)
        terms = [_logsumexp(T.shift(a, logw), axis=1) for a in per_class]
        joint = per_class[0]
        for a in per_class[1:]:
            joint = T.add(joint, a)
        total = _logsumexp(T.shift(joint, logw), axis=1)
        return terms, total

    def _class_terms(self, flats):
        out = []
        for i, (z, d) in enumerate(zip(flats, self.latent_dims)):
            mu = T.narrow(self.means.value, 1, self.offsets[i], d)  # (K, d)
            diff = T.sub(T.reshape(z, (z.shape[0], 1, d)), mu)  # (N, K, d)
            ss = T.tsum(T.mul(diff, diff), axis=2)
            out.append(T.shift(T.scale(ss, -0.5), -0.5 * d * LOG_2PI))
        return out

    def class_log_densities(self, zs):
        """(N, K) tensor of log p(z | class k), for class-conditional scoring."""
        if self.means is None:
            raise ContractError("class-conditional densities need a mixture prior")
        per_class = self._class_terms(self._flat(zs))
        joint = per_class[0]
        for a in per_class[1:]:
            joint = T.add(joint, a)
        return joint


@dataclass
class ModelConfig:
    variant: str = "conv"  # conv | dense | local_patch
    input_shape: tuple = (3, 32, 32)  # (C, H, W)
    num_scales: int = 3
    steps_per_scale: int = 4
    hidden_width: int = 32  # conv coupling hidden channels
    dense_hidden: int = 0  # 0 -> D // 6 rule
    patch_size: int = 8  # local_patch only
    prior: str = "standard_normal"
    num_classes: int = 1
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


class FlowScale:
    """One squeeze -> K steps -> (split | emit-all) stage."""

    def __init__(self, steps, split, flatten_shape=None):
        self.squeeze = Squeeze()
        self.steps = steps
        self.split = split  # Split or None (final scale)
        self.flatten_shape = flatten_shape  # (C,H,W) for the dense variant

    def layers(self):
        return self.steps

    def parameters(self):
        out = []
        for layer in self.steps:
            out.extend(layer.parameters())
        return out

    def forward(self, h):
        h = self.squeeze.forward(h).y
        lead = h.shape[:-3]
        spatial_shape = h.shape[-3:]
        if self.flatten_shape is not None:
            h = T.reshape(h, lead + (int(np.prod(spatial_shape)),))
        log_det = Tensor(0.0)
        for layer in self.steps:
            out = layer.forward(h)
            h = out.y
            log_det = T.add(log_det, out.log_det)
        if self.flatten_shape is not None:
            h = T.reshape(h, lead + spatial_shape)
        if self.split is not None:
            h, z = self.split.apply(h)
            return h, z, log_det
        return None, h, log_det

    def inverse(self, h_next, z):
        y = z if self.split is None else self.split.merge(h_next, z)
        lead = y.shape[:-3]
        spatial_shape = y.shape[-3:]
        if self.flatten_shape is not None:
            y = T.reshape(y, lead + (int(np.prod(spatial_shape)),))
        for layer in reversed(self.steps):
            y = layer.inverse(y)
        if self.flatten_shape is not None:
            y = T.reshape(y, lead + spatial_shape)
        return self.squeeze.inverse(y)


class LatentCode:
    """Latent parts z_1..z_S of one example with their scale contributions."""

    __slots__ = ("parts", "contributions", "total")

    def __init__(self, parts, contributions, total):
        self.parts = parts
        self.contributions = contributions
        self.total = total


class FlowOutput:
    """Batched encoding: latent parts, per-scale contributions, total log p."""

    __slots__ = ("zs", "contributions", "total")

    def __init__(self, zs, contributions, total):
        self.zs = zs
        self.contributions = contributions
        self.total = total


class LatentAscentResult:
    __slots__ = ("image", "log_probs")

    def __init__(self, image, log_probs):
        self.image = image
        self.log_probs = log_probs


class FlowModel:
    """Multi-scale invertible density model (conv or dense variant)."""

    def __init__(self, config, scales, prior):
        self.config = config
        self.variant = config.variant
        self.input_shape = tuple(config.input_shape)
        self.scales = scales
        self.prior = prior

    @property
    def num_scales(self):
        return len(self.scales)

    @property
    def latent_shapes(self):
        return list(self._latent_shapes)

    def parameters(self):
        out = []
        for sc in self.scales:
            out.extend(sc.parameters())
        out.extend(self.prior.parameters())
        return out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def reset_gradients(self):
        for p in self.parameters():
            p.reset_gradient()

    def actnorm_layers(self):
        return [l for sc in self.scales for l in sc.layers() if isinstance(l, ActNorm)]

    def mark_actnorm_initialized(self):
        for l in self.actnorm_layers():
            l.initialized = True

    def initialize_actnorm(self, batch):
        """Data-dependent actnorm init, scale by scale, on a preprocessed batch."""
        h = batch if isinstance(batch, Tensor) else Tensor(batch)
        if h.ndim != 4:
            raise ContractError("actnorm init expects a batched (N,C,H,W) tensor")
        for sc in self.scales:
            h_ = sc.squeeze.forward(h).y
            lead = h_.shape[:-3]
            spatial_shape = h_.shape[-3:]
            if sc.flatten_shape is not None:
                h_ = T.reshape(h_, lead + (int(np.prod(spatial_shape)),))
            for layer in sc.steps:
                if isinstance(layer, ActNorm) and not layer.initialized:
                    layer.init_from_batch(h_)
                h_ = layer.forward(h_).y
            if sc.flatten_shape is not None:
                h_ = T.reshape(h_, lead + spatial_shape)
            if sc.split is not None:
                h, _ = sc.split.apply(h_)
            else:
                h = None

    def _check_input(self, x):
        if x.shape[-3:] != self.input_shape:
            raise ShapeError(f"expected input {self.input_shape}, got {x.shape}")

    def flow_graph(self, x):
        """Batched forward: returns (latent parts, per-scale log-det tensors)."""
        self._check_input(x)
        zs, log_dets = [], []
        h = x
        for sc in self.scales:
            h, z, ld = sc.forward(h)
            zs.append(z)
            log_dets.append(ld)
        return zs, log_dets

    def log_prob_graph(self, x):
        """Batched differentiable log p(x) with per-scale contributions."""
        zs, log_dets = self.flow_graph(x)
        terms, prior_total = self.prior.scale_terms(zs)
        contributions = [T.add(t, ld) for t, ld in zip(terms, log_dets)]
        total = prior_total
        for ld in log_dets:
            total = T.add(total, ld)
        return FlowOutput(zs, contributions, total)

    def log_prob(self, x):
        """(N,) ndarray of log-densities; no gradient bookkeeping."""
        batch = x if isinstance(x, Tensor) else Tensor(x)
        return self.log_prob_graph(batch).total.data.copy()

    def log_prob_per_class(self, x):
        """(N, K) class-conditional log p(x | k) under a mixture prior."""
        batch = x if isinstance(x, Tensor) else Tensor(x)
        zs, log_dets = self.flow_graph(batch)
        per_class = self.prior.class_log_densities(zs)
        ld = log_dets[0]
        for d in log_dets[1:]:
            ld = T.add(ld, d)
        return T.add(per_class, T.reshape(ld, (batch.shape[0], 1))).data.copy()

    def encode(self, x):
        """LatentCode (parts, per-scale contributions, total) for one example."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        out = self.log_prob_graph(T.reshape(xt, (1,) + xt.shape))
        parts = [Tensor(z.data[0]) for z in out.zs]
        cs = [float(c.data[0]) for c in out.contributions]
        return LatentCode(parts, cs, float(out.total.data[0]))

    def decode_graph(self, zs):
        """Batched differentiable inverse pass from latent parts to input space."""
        h = None
        for sc, z in zip(reversed(self.scales), reversed(list(zs))):
            h = sc.inverse(h, z)
        return h

    def decode(self, latent):
        """Inverse of :meth:`encode` for one example (LatentCode or parts list)."""
        parts = latent.parts if isinstance(latent, LatentCode) else list(latent)
        zs = [T.reshape(z if isinstance(z, Tensor) else Tensor(z), (1,) + tuple(z.shape)) for z in parts]
        x = self.decode_graph(zs)
        return Tensor(x.data[0])


def mix_latents(model, image_a, image_b, take_from_b):
    """Splice the two images' latent parts and decode.

    ``take_from_b`` holds 1-based scale indices whose parts come from
    ``image_b``; an empty set reproduces ``image_a``.
    """
    bad = [i for i in take_from_b if not 1 <= i <= model.num_scales]
    if bad:
        raise ContractError(f"scale indices out of range: {bad}")
    code_a = model.encode(image_a)
    code_b = model.encode(image_b)
    parts = [
        code_b.parts[i] if (i + 1) in take_from_b else code_a.parts[i]
        for i in range(model.num_scales)
    ]
    return model.decode(parts)


def optimize_early_latents(model, x, steps, step_size):
    """Gradient ascent of log p over z_1..z_{S-1} with the final part fixed.

    Monotone by construction: a step that would decrease log p is retried
    with a halved step size (at most 20 halvings), else skipped. Returns the
    decoded image and the per-step log p trace (steps+1 values).
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if model.num_scales < 2:
        raise ContractError("latent optimization needs a multi-scale model")
    code = model.encode(x)
    parts = [z.data.copy()[None] for z in code.parts]  # batched N=1

    def current_logp(zs_data):
        zs = [Tensor(z) for z in zs_data]
        xr = model.decode_graph(zs)
        return float(model.log_prob_graph(xr).total.data[0])

    history = [current_logp(parts)]
    for _ in range(steps):
        with Tape(track_params=False) as tape:
            zs = [Tensor(z) for z in parts]
            for z in zs[:-1]:
                tape.watch(z)
            xr = model.decode_graph(zs)
            total = T.tsum(model.log_prob_graph(xr).total)
        backward(tape, total)
        grads = [tape.grad(z) for z in zs[:-1]]
        if any(g is None or not np.all(np.isfinite(g.data)) for g in grads):
            raise NumericsError("non-finite gradient in latent ascent")
        base = history[-1]
        step = float(step_size)
        moved = False
        for _ in range(21):
            trial = [z + step * g.data for z, g in zip(parts[:-1], grads)] + [parts[-1]]
            lp = current_logp(trial)
            if lp >= base or step == 0.0:
                parts = trial
                history.append(lp)
                moved = True
                break
            step *= 0.5
        if not moved:
            history.append(base)
    image = model.decode([Tensor(z[0]) for z in parts])
    return LatentAscentResult(image, history)


def _build_scales(cfg, rng):
    c, h, w = cfg.input_shape
    scales = []
    latent_shapes = []
    for i in range(cfg.num_scales):
        if h % 2 or w % 2:
            raise ConfigError(
                f"spatial size {h}x{w} not divisible by 2 at scale {i + 1}; "
                f"reduce num_scales"
            )
        c, h, w = 4 * c, h // 2, w // 2
        dense = cfg.variant == "dense"
        d = c * h * w
        steps = []
        for _ in range(cfg.steps_per_scale):
            if dense:
                hidden = cfg.dense_hidden or max(4, d // 6)
                cond = (d + 1) // 2
                net = DenseCouplingNet(cond, d - cond, hidden, rng)
                steps.append(ActNorm(d, spatial=False))
                steps.append(Invertible1x1(d, rng, spatial=False, trainable=False))
                steps.append(AffineCoupling(d, net, spatial=False))
            else:
                cond = (c + 1) // 2
                net = ConvCouplingNet(cond, c - cond, cfg.hidden_width, rng)
                steps.append(ActNorm(c, spatial=True))
                steps.append(Invertible1x1(c, rng, spatial=True))
                steps.append(AffineCoupling(c, net, spatial=True))
        last = i == cfg.num_scales - 1
        split = None if last else Split(c, spatial=True)
        scales.append(FlowScale(steps, split, flatten_shape=(c, h, w) if dense else None))
        if last:
            latent_shapes.append((c, h, w))
        else:
            latent_shapes.append((c // 2, h, w))
            c //= 2
    return scales, latent_shapes


class LocalPatchModel:
    """Single-scale model applied independently to non-overlapping patches.

    The image log-density is the sum of the per-patch log-densities; there
    is no cross-patch coupling of any kind.
    """

    def __init__(self, config, inner):
        self.config = config
        self.variant = config.variant
        self.input_shape = tuple(config.input_shape)
        self.inner = inner
        p = config.patch_size
        _, h, w = self.input_shape
        self.grid = (h // p, w // p)
        self.patch_size = p

    @property
    def num_scales(self):
        return 1

    def parameters(self):
        return self.inner.parameters()

    def trainable_parameters(self):
        return self.inner.trainable_parameters()

    def reset_gradients(self):
        self.inner.reset_gradients()

    def actnorm_layers(self):
        return self.inner.actnorm_layers()

    def mark_actnorm_initialized(self):
        self.inner.mark_actnorm_initialized()

    def _patchify(self, x):
        p = self.patch_size
        gi, gj = self.grid
        patches = []
        for i in range(gi):
            row = T.narrow(x, 2, i * p, p)
            for j in range(gj):
                patches.append(T.narrow(row, 3, j * p, p))
        return T.concat(patches, 0)  # (P*N, C, p, p), patch-major

    def _stitch(self, patches, n):
        gi, gj = self.grid
        rows = []
        for i in range(gi):
            cols = [T.narrow(patches, 0, (i * gj + j) * n, n) for j in range(gj)]
            rows.append(T.concat(cols, 3))
        return T.concat(rows, 2)

    def initialize_actnorm(self, batch):
        h = batch if isinstance(batch, Tensor) else Tensor(batch)
        self.inner.initialize_actnorm(self._patchify(h))

    def log_prob_graph(self, x):
        n = x.shape[0]
        out = self.inner.log_prob_graph(self._patchify(x))
        per_patch = T.reshape(out.total, (self.grid[0] * self.grid[1], n))
        total = T.tsum(per_patch, axis=0)
        return FlowOutput(out.zs, [total], total)

    def log_prob(self, x):
        batch = x if isinstance(x, Tensor) else Tensor(x)
        return self.log_prob_graph(batch).total.data.copy()

    def encode(self, x):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        out = self.log_prob_graph(T.reshape(xt, (1,) + xt.shape))
        total = float(out.total.data[0])
        return LatentCode([Tensor(out.zs[0].data)], [total], total)

    def decode_graph(self, zs):
        patches = self.inner.decode_graph(zs)
        n = patches.shape[0] // (self.grid[0] * self.grid[1])
        return self._stitch(patches, n)

    def decode(self, latent):
        parts = latent.parts if isinstance(latent, LatentCode) else list(latent)
        x = self.decode_graph([parts[0] if isinstance(parts[0], Tensor) else Tensor(parts[0])])
        return Tensor(x.data[0])


def build_variant(config):
    """Construct a model from its configuration (conv, dense or local_patch)."""
    cfg = config
    if cfg.num_scales < 1:
        raise ConfigError("need at least one scale")
    if cfg.steps_per_scale < 0:
        raise ConfigError("steps_per_scale must be >= 0")
    if len(cfg.input_shape) != 3:
        raise ConfigError(f"input_shape must be (C,H,W), got {cfg.input_shape}")
    rng = np.random.default_rng(cfg.seed)
    if cfg.variant in ("conv", "dense"):
        scales, latent_shapes = _build_scales(cfg, rng)
        dims = [int(np.prod(s)) for s in latent_shapes]
        prior = Prior(dims, kind=cfg.prior, num_classes=cfg.num_classes)
        model = FlowModel(cfg, scales, prior)
        model._latent_shapes = latent_shapes
        return model
    if cfg.variant == "local_patch":
        c, h, w = cfg.input_shape
        p = cfg.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
        inner_cfg = ModelConfig(
            variant="conv",
            input_shape=(c, p, p),
            num_scales=1,
            steps_per_scale=cfg.steps_per_scale,
            hidden_width=cfg.hidden_width,
            prior=cfg.prior,
            num_classes=cfg.num_classes,
            seed=cfg.seed,
        )
        inner = build_variant(inner_cfg)
        return LocalPatchModel(cfg, inner)
    raise ConfigError(f"unknown variant {cfg.variant!r}")


def randomize_model(model, rng, spread=0.1):
    """Random but valid parameters (for round-trip and Jacobian property tests)."""
    inner = model if isinstance(model, FlowModel) else model.inner
    for sc in inner.scales:
        for layer in sc.steps:
            if isinstance(layer, ActNorm):
                layer.scale.assign(np.exp(rng.normal(0.0, spread, layer.log_scale_shape)))
                layer.bias.assign(rng.normal(0.0, spread, layer.log_scale_shape))
                layer.initialized = True
            elif isinstance(layer, Invertible1x1):
                n = layer.num_features
                w = random_rotation_jitter(n, rng, spread)
                layer.weight.assign(w)
            elif isinstance(layer, AffineCoupling):
                for p in layer.parameters():
                    p.assign(rng.normal(0.0, spread, p.value.shape))
    if inner.prior.means is not None:
        inner.prior.means.assign(rng.normal(0.0, spread, inner.prior.means.value.shape))


def random_rotation_jitter(n, rng, spread):
    from .layers import random_rotation

    return random_rotation(n, rng) @ np.diag(np.exp(rng.normal(0.0, spread, n)))
