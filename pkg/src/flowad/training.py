"""Maximum-likelihood training with dequantization, the ratio-logit outlier
loss, a hinge (margin) baseline, infinity-norm Adam updates and the
non-finite-batch stabilization rule.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericsError
from .tensor import Tape, Tensor, backward

LN2 = math.log(2.0)
QUANT = 1.0 / 256.0


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 5e-5
    epochs: int = 10
    batch_size: int = 32
    temperature: float = 1000.0
    outlier_weight: float = 6000.0
    margin: float = 100.0
    loss: str = "nll_only"  # nll_only | nll_plus_outlier | nll_plus_margin
    augment_translate: int = 0  # max shift in pixels, zero fill
    augment_flip: bool = False
    dequantize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.outlier_weight < 0:
            raise ConfigError("outlier weight must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.loss not in ("nll_only", "nll_plus_outlier", "nll_plus_margin"):
            raise ConfigError(f"unknown loss kind {self.loss!r}")


class SkipBatchType:
    """Sentinel: too many non-finite examples, take no optimizer step."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "SkipBatch"


SkipBatch = SkipBatchType()


def stabilize_batch(per_example_logp):
    """Indices of finite entries, or :data:`SkipBatch` if over 75% are not."""
    logps = list(per_example_logp)
    if not logps:
        raise ContractError("stabilize_batch needs a nonempty batch")
    keep = [i for i, v in enumerate(logps) if math.isfinite(v)]
    if len(logps) - len(keep) > 0.75 * len(logps):
        return SkipBatch
    return keep


def bits_per_dim(logp, dims):
    """Encoding cost in bits per dimension for 256-level pixels."""
    if dims <= 0:
        raise ContractError("dims must be positive")
    return -logp / (dims * LN2) + 8.0


def dequantize_batch(x, rng):
    """Add uniform U[0, 1/256) noise per pixel (training-time only)."""
    return x + rng.uniform(0.0, QUANT, size=x.shape)


def _shift2d(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[-2], img.shape[-1]
    src_y = slice(max(0, -dy), h - max(0, dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def augment_batch(x, rng, translate=0, flip=False):
    """Integer-pixel translations with zero fill, optional horizontal flips."""
    out = x.copy()
    if translate:
        for i in range(x.shape[0]):
            dy, dx = rng.integers(-translate, translate + 1, size=2)
            out[i] = _shift2d(out[i], int(dy), int(dx))
    if flip:
        for i in range(x.shape[0]):
            if rng.random() < 0.5:
                out[i] = out[i][..., ::-1]
    return out


def nll_loss(model, batch, dequantize=False, rng=None):
    """Mean negative log-likelihood (nats per example) as a scalar tensor.

    ``batch`` must already be preprocessed to [-0.5, 0.5 - 1/256]; with
    ``dequantize`` the standard uniform noise is added first.
    """
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if dequantize:
        if rng is None:
            raise ContractError("dequantization requires a seeded rng")
        x = dequantize_batch(x, rng)
    out = model.log_prob_graph(Tensor(x))
    return T.scale(T.tsum(out.total), -1.0 / x.shape[0])


def outlier_loss(logp_in_g, logp_g_g, temperature, weight):
    """Ratio-logit classification loss on one general-distribution sample.

    -weight * ln sigma((logp_g_g - logp_in_g) / temperature); zero when the
    general model wins by a wide margin, large when the in-model does.
    """
    if temperature <= 0:
        raise ContractError("temperature must be > 0")
    u = (logp_g_g - logp_in_g) / temperature
    if math.isnan(u):
        u = -math.inf  # one operand clipped to -inf: maximal penalty
    if u > 0:
        return weight * math.log1p(math.exp(-u))
    if math.isinf(u):
        return 0.0 if u > 0 else math.inf
    return weight * (math.log1p(math.exp(u)) - u)


def _outlier_loss_graph(logp_in, logp_g, temperature, weight):
    """Batched tensor version; mean over the batch, differentiable in logp_in."""
    diff = T.scale(T.sub(Tensor(logp_g), logp_in), 1.0 / temperature)
    per = T.scale(T.log_sigmoid(diff), -weight)
    return per.mean()


def margin_loss(logp_in_g, margin, inlier_mean_logp):
    """Hinge on (margin + outlier logp - mean inlier logp), zero when satisfied."""
    if not math.isfinite(margin):
        raise ContractError("margin must be finite")
    return max(0.0, margin + logp_in_g - inlier_mean_logp)


def _margin_loss_graph(logp_in_g, margin, inlier_mean_logp):
    """Hinge with a graph-connected reference: gradients flow into both the
    outlier log-likelihoods and the inlier batch mean."""
    hinge = T.relu(T.shift(T.sub(logp_in_g, inlier_mean_logp), margin))
    return hinge.mean()


class Adamax:
    """Infinity-norm Adam variant: u tracks max(beta2*u, |g|), step uses m-hat/(u+eps)."""

    def __init__(self, params, learning_rate, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.value.shape) for p in self.params]
        self.u = [np.zeros(p.value.shape) for p in self.params]

    def step(self):
        self.t += 1
        correction = 1.0 - self.beta1**self.t
        for i, p in enumerate(self.params):
            g = p.gradient.data
            if not np.all(np.isfinite(g)):
                raise NumericsError("non-finite gradient reached the optimizer")
            if self.weight_decay:
                g = g + self.weight_decay * p.value.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.u[i] = np.maximum(self.beta2 * self.u[i], np.abs(g))
            update = self.learning_rate * (self.m[i] / correction) / (self.u[i] + self.eps)
            p.assign(p.value.data - update)


def _batched_indices(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _filter_finite(*logp_arrays):
    """Joint finite mask over parallel per-example arrays; SkipBatch on >75% loss."""
    mask = np.ones(len(logp_arrays[0]), dtype=bool)
    for arr in logp_arrays:
        mask &= np.isfinite(arr)
    keep = np.flatnonzero(mask)
    if len(mask) - len(keep) > 0.75 * len(mask):
        return SkipBatch
    return keep


def train(model, train_x, config, general_x=None, general_model=None, labels=None):
    """Train in place; returns (model, history rows).

    ``train_x`` is a preprocessed (N,C,H,W) float array. Outlier/margin
    losses draw minibatches from ``general_x`` and, for the outlier loss,
    score them under the frozen ``general_model``. With ``labels`` and a
    mixture prior, examples are scored under their own class mode and other
    classes additionally act as in-batch negatives for the outlier loss.
    """
    needs_general = config.loss in ("nll_plus_outlier", "nll_plus_margin")
    if needs_general and general_x is None:
        raise ConfigError(f"{config.loss} requires general-distribution samples")
    if config.loss == "nll_plus_outlier" and general_model is None:
        raise ConfigError("outlier loss requires a frozen general-distribution model")
    supervised = labels is not None
    if supervised and model.config.prior != "gaussian_mixture":
        raise ConfigError("labeled training requires a gaussian_mixture prior")

    rng = np.random.default_rng(config.seed)
    dims = int(np.prod(model.input_shape))
    history = [(0, "meta", "seed", float(config.seed))]
    if config.epochs == 0:
        return model, []
    opt = Adamax(
        model.trainable_parameters(), config.learning_rate, weight_decay=config.weight_decay
    )
    n = train_x.shape[0]
    initialized = all(l.initialized for l in model.actnorm_layers())

    for epoch in range(1, config.epochs + 1):
        nll_sum = 0.0
        out_sum = 0.0
        batches = 0
        skipped = 0
        for idx in _batched_indices(n, config.batch_size, rng):
            xb = train_x[idx]
            yb = labels[idx] if supervised else None
            if config.augment_translate or config.augment_flip:
                xb = augment_batch(
                    xb, rng, translate=config.augment_translate, flip=config.augment_flip
                )
            if config.dequantize:
                xb = dequantize_batch(xb, rng)
            if not initialized:
                model.initialize_actnorm(Tensor(xb))
                initialized = True

            logps = _per_example_logp(model, xb, yb)
            keep = stabilize_batch(list(logps))
            if keep is SkipBatch:
                skipped += 1
                continue
            xb = xb[keep]
            if yb is not None:
                yb = yb[keep]

            xg = logp_g = None
            if needs_general:
                gidx = rng.integers(0, general_x.shape[0], size=min(config.batch_size, len(keep)))
                xg = general_x[gidx]
                if config.dequantize:
                    xg = dequantize_batch(xg, rng)
                if config.loss == "nll_plus_outlier":
                    logp_g = general_model.log_prob(xg)
                    gkeep = _filter_finite(_per_example_logp(model, xg, None), logp_g)
                else:
                    gkeep = _filter_finite(_per_example_logp(model, xg, None))
                if gkeep is SkipBatch:
                    skipped += 1
                    continue
                xg = xg[gkeep]
                if logp_g is not None:
                    logp_g = logp_g[gkeep]

            logp_g_in = None
            if yb is not None and config.loss == "nll_plus_outlier":
                logp_g_in = general_model.log_prob(xb)
                gin_keep = _filter_finite(logp_g_in)
                if gin_keep is SkipBatch:
                    skipped += 1
                    continue
                xb = xb[gin_keep]
                yb = yb[gin_keep]
                logp_g_in = logp_g_in[gin_keep]
            with Tape() as tape:
                loss, nll_val, out_val = _loss_graph(
                    model, xb, yb, xg, logp_g, config, logp_g_in=logp_g_in
                )
            backward(tape, loss)
            opt.step()
            model.reset_gradients()
            nll_sum += nll_val
            out_sum += out_val
            batches += 1

        mean_nll = nll_sum / batches if batches else math.inf
        history.append((epoch, "train", "nll", mean_nll))
        history.append((epoch, "train", "bpd", bits_per_dim(-mean_nll, dims)))
        history.append((epoch, "train", "outlier_loss", out_sum / batches if batches else 0.0))
        history.append((epoch, "train", "skipped_batches", float(skipped)))
    return model, history


def _per_example_logp(model, x, labels):
    if labels is None:
        return model.log_prob(x)
    per_class = model.log_prob_per_class(x)
    return per_class[np.arange(len(labels)), labels]


def _loss_graph(model, xb, yb, xg, logp_g, config, logp_g_in=None):
    """Total loss tensor plus float nll / outlier components for the history."""
    if yb is None:
        out = model.log_prob_graph(Tensor(xb))
        totals = out.total
    else:
        zs, log_dets = model.flow_graph(Tensor(xb))
        per_class = model.prior.class_log_densities(zs)
        ld = log_dets[0]
        for d in log_dets[1:]:
            ld = T.add(ld, d)
        own = T.gather_rows(
            T.reshape(per_class, (per_class.size,)),
            np.arange(len(yb)) * model.prior.num_classes + np.asarray(yb),
        )
        totals = T.add(own, ld)
    nll = T.scale(T.tsum(totals), -1.0 / xb.shape[0])
    loss = nll
    out_val = 0.0

    if xg is not None and config.loss == "nll_plus_outlier":
        logp_in_g = model.log_prob_graph(Tensor(xg)).total
        lo = _outlier_loss_graph(
            logp_in_g, logp_g, config.temperature, config.outlier_weight
        )
        if yb is not None and logp_g_in is not None:
            lo = T.add(lo, _supervised_mode_outliers(model, xb, yb, logp_g_in, config))
        loss = T.add(loss, lo)
        out_val = lo.item()
    elif xg is not None and config.loss == "nll_plus_margin":
        logp_in_g = model.log_prob_graph(Tensor(xg)).total
        inlier_mean = totals.mean()
        hinge = _margin_loss_graph(logp_in_g, config.margin, inlier_mean)
        lo = T.scale(hinge, config.outlier_weight)
        loss = T.add(loss, lo)
        out_val = lo.item()
    return loss, nll.item(), out_val


def _supervised_mode_outliers(model, xb, yb, logp_general, config):
    """Per-mode negatives: for mode k, samples of other classes play the role
    of the general-distribution samples, with the frozen general model as
    the ratio reference."""
    zs, log_dets = model.flow_graph(Tensor(xb))
    per_class = model.prior.class_log_densities(zs)  # (N, K)
    ld = log_dets[0]
    for d in log_dets[1:]:
        ld = T.add(ld, d)
    logp_k = T.add(per_class, T.reshape(ld, (xb.shape[0], 1)))
    k = model.prior.num_classes
    mask = np.ones((xb.shape[0], k))
    mask[np.arange(len(yb)), np.asarray(yb)] = 0.0
    count = mask.sum()
    if count == 0:
        return Tensor(0.0)
    ref = Tensor(np.asarray(logp_general).reshape(xb.shape[0], 1))
    diff = T.scale(T.sub(ref, logp_k), 1.0 / config.temperature)
    per = T.scale(T.mul(T.log_sigmoid(diff), Tensor(mask)), -config.outlier_weight)
    return T.scale(T.tsum(per), 1.0 / count)


def write_history(history, path, header_lines=()):
    """Line-delimited history: epoch <tab> split <tab> metric <tab> value."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for epoch, split, metric, value in history:
            f.write(f"{epoch}\t{split}\t{metric}\t{value!r}\n")


def read_history(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            epoch, split, metric, value = line.rstrip("\n").split("\t")
            rows.append((int(epoch), split, metric, float(value)))
    return rows
