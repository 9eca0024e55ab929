"""Losses (closed forms and finite-difference checks), optimizer update rule,
stabilization semantics, and small monitored training runs."""

import math

import numpy as np
import pytest
from conftest import GRAD_RTOL, fd_gradient, grad_rel_error, randomized, small_model

from flowad.errors import ConfigError, ContractError
from flowad.models import ModelConfig, build_variant
from flowad.tensor import Parameter, Tape, backward
from flowad.training import (
    Adamax,
    SkipBatch,
    TrainConfig,
    _loss_graph,
    augment_batch,
    bits_per_dim,
    dequantize_batch,
    margin_loss,
    nll_loss,
    outlier_loss,
    read_history,
    stabilize_batch,
    train,
    write_history,
)

LOG_2PI = math.log(2.0 * math.pi)


def identity_model(shape=(3, 4, 4), scales=2):
    return small_model(shape=shape, scales=scales, steps=0)


# --- nll -------------------------------------------------------------------


def test_nll_closed_form_identity_model():
    model = identity_model()
    batch = np.zeros((5, 3, 4, 4))
    loss = nll_loss(model, batch, dequantize=False)
    assert loss.item() == pytest.approx(24.0 * LOG_2PI, rel=1e-12)


def test_nll_deterministic_without_noise(rng):
    model = randomized(small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2), seed=1)
    batch = rng.uniform(-0.5, 0.5, size=(4, 1, 4, 4))
    assert nll_loss(model, batch).item() == nll_loss(model, batch).item()


def test_nll_dequantize_reproducible_with_seed(rng):
    model = randomized(small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2), seed=1)
    batch = rng.uniform(-0.5, 0.4, size=(4, 1, 4, 4))
    a = nll_loss(model, batch, dequantize=True, rng=np.random.default_rng(7)).item()
    b = nll_loss(model, batch, dequantize=True, rng=np.random.default_rng(7)).item()
    c = nll_loss(model, batch, dequantize=True, rng=np.random.default_rng(8)).item()
    assert a == b
    assert a != c


def test_nll_dequantize_requires_rng():
    with pytest.raises(ContractError):
        nll_loss(identity_model(), np.zeros((2, 3, 4, 4)), dequantize=True)


# --- bits per dimension ----------------------------------------------------


def test_bpd_values():
    assert bits_per_dim(0.0, 10) == pytest.approx(8.0)
    assert bits_per_dim(-64.0 * math.log(2.0), 64) == pytest.approx(9.0)
    assert bits_per_dim(float("-inf"), 3072) == math.inf
    with pytest.raises(ContractError):
        bits_per_dim(0.0, 0)


def test_bpd_inverts_at_full_image_scale():
    # 3.36 bpd over 3072 dims, the ballpark of well-trained 32x32 rgb models
    logp = (8.0 - 3.36) * 3072 * math.log(2.0)
    assert bits_per_dim(logp, 3072) == pytest.approx(3.36)


# --- outlier loss ----------------------------------------------------------


def test_outlier_loss_equal_inputs():
    assert outlier_loss(-500.0, -500.0, 1000.0, 6000.0) == pytest.approx(
        6000.0 * math.log(2.0), rel=1e-12
    )


def test_outlier_loss_limits():
    assert outlier_loss(float("-inf"), -100.0, 1000.0, 6000.0) == 0.0
    assert outlier_loss(-100.0, float("-inf"), 1000.0, 6000.0) == math.inf


def test_outlier_loss_unit_example():
    assert outlier_loss(-1100.0, -100.0, 1000.0, 1.0) == pytest.approx(
        -math.log(1.0 / (1.0 + math.exp(-1.0))), rel=1e-9
    )


def test_outlier_loss_strictly_decreasing_in_difference():
    diffs = np.linspace(-5000.0, 5000.0, 100)
    values = [outlier_loss(-d, 0.0, 1000.0, 6000.0) for d in diffs]
    assert all(a > b for a, b in zip(values, values[1:]))


# --- margin loss -----------------------------------------------------------


def test_margin_loss_cases():
    assert margin_loss(-200.0, 50.0, -100.0) == 0.0
    assert margin_loss(-120.0, 50.0, -100.0) == pytest.approx(30.0)
    with pytest.raises(ContractError):
        margin_loss(-100.0, float("inf"), -100.0)


# --- stabilization ---------------------------------------------------------


def test_stabilize_all_finite():
    assert stabilize_batch([1.0, -2.0, 3.0]) == [0, 1, 2]


def test_stabilize_drops_nonfinite():
    logps = [1.0] * 7 + [float("-inf")]
    assert stabilize_batch(logps) == list(range(7))
    logps = [float("nan"), 1.0, 2.0, 3.0]
    assert stabilize_batch(logps) == [1, 2, 3]


def test_stabilize_skips_over_75_percent():
    assert stabilize_batch([float("-inf")] * 7 + [1.0]) is SkipBatch
    assert stabilize_batch([float("-inf")] * 4) is SkipBatch
    # exactly 75% dropped is still kept
    assert stabilize_batch([float("-inf")] * 3 + [1.0]) == [3]


def test_stabilize_empty_raises():
    with pytest.raises(ContractError):
        stabilize_batch([])


# --- optimizer -------------------------------------------------------------


def test_adamax_hand_computed_first_step():
    p = Parameter([0.0])
    p.gradient.data[:] = 1.0
    opt = Adamax([p], learning_rate=5e-4, weight_decay=0.0)
    opt.step()
    expected = -5e-4 * (1.0 / (1.0 + 1e-8))
    assert p.value.data[0] == pytest.approx(expected, rel=1e-12)
    assert opt.m[0][0] == pytest.approx(0.1)
    assert opt.u[0][0] == pytest.approx(1.0)
    assert opt.t == 1


def test_adamax_zero_grad_no_change():
    p = Parameter([1.5])
    opt = Adamax([p], learning_rate=1e-2, weight_decay=0.0)
    opt.step()
    assert p.value.data[0] == 1.5


def test_adamax_weight_decay_shrinks_magnitude():
    p = Parameter([2.0])
    opt = Adamax([p], learning_rate=1e-3, weight_decay=0.1)
    prev = 2.0
    for _ in range(5):
        opt.step()  # gradient is zero; only decay acts
        assert abs(p.value.data[0]) < abs(prev)
        prev = p.value.data[0]


def test_adamax_skips_frozen_parameters():
    p = Parameter([1.0], trainable=False)
    p.gradient.data[:] = 5.0
    opt = Adamax([p], learning_rate=1e-1)
    opt.step()
    assert p.value.data[0] == 1.0


def test_adamax_rejects_nonfinite_gradient():
    from flowad.errors import NumericsError

    p = Parameter([1.0])
    p.gradient.data[:] = float("nan")
    opt = Adamax([p], learning_rate=1e-1)
    with pytest.raises(NumericsError):
        opt.step()


# --- gradient of total losses vs finite differences -------------------------


def micro_model():
    model = small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2, seed=3)
    model = randomized(model, seed=4, spread=0.2)
    n_trainable = sum(p.value.size for p in model.trainable_parameters())
    assert n_trainable <= 200
    return model


def loss_value(model, general, xb, xg, logp_g, cfg):
    with Tape() as tape:
        loss, _, _ = _loss_graph(model, xb, None, xg, logp_g, cfg)
    return loss, tape


@pytest.mark.parametrize("kind", ["nll_only", "nll_plus_outlier", "nll_plus_margin"])
def test_loss_gradients_match_fd(kind, rng):
    model = micro_model()
    general = randomized(small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2), seed=6)
    xb = rng.uniform(-0.4, 0.4, size=(3, 1, 4, 4))
    xg = rng.uniform(-0.4, 0.4, size=(3, 1, 4, 4))
    logp_g = general.log_prob(xg)
    cfg = TrainConfig(loss=kind, temperature=50.0, outlier_weight=3.0, margin=5.0, epochs=1)
    use_xg = xg if kind != "nll_only" else None
    use_lg = logp_g if kind == "nll_plus_outlier" else None

    loss, tape = loss_value(model, general, xb, use_xg, use_lg, cfg)
    backward(tape, loss)
    for p in model.trainable_parameters():
        analytic = p.gradient.data.copy()
        numeric = fd_gradient(
            lambda: loss_value(model, general, xb, use_xg, use_lg, cfg)[0].item(),
            p.value.data,
        )
        assert grad_rel_error(analytic, numeric) < GRAD_RTOL, kind


# --- train loop ------------------------------------------------------------


def smooth_batchset(n, shape, seed):
    from flowad.data import gen_synthetic
    from flowad.evaluation import preprocess_train

    return preprocess_train(gen_synthetic("smooth", n, shape, seed).images)


def test_train_zero_epochs_no_change():
    model = small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2, seed=1)
    before = [p.value.data.copy() for p in model.parameters()]
    _, history = train(model, smooth_batchset(8, (1, 4, 4), 0), TrainConfig(epochs=0))
    assert history == []
    for p, b in zip(model.parameters(), before):
        np.testing.assert_array_equal(p.value.data, b)


def test_train_requires_general_for_outlier_losses():
    model = small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2)
    x = smooth_batchset(8, (1, 4, 4), 0)
    with pytest.raises(ConfigError):
        train(model, x, TrainConfig(epochs=1, loss="nll_plus_outlier"))
    with pytest.raises(ConfigError):
        train(model, x, TrainConfig(epochs=1, loss="nll_plus_outlier"), general_x=x)
    with pytest.raises(ConfigError):
        train(model, x, TrainConfig(epochs=1, loss="nll_plus_margin"))


def test_train_reduces_bpd_on_smooth_set():
    model = small_model(variant="dense", shape=(2, 4, 4), scales=1, steps=2, seed=5)
    x = smooth_batchset(200, (2, 4, 4), seed=9)
    cfg = TrainConfig(epochs=30, batch_size=32, learning_rate=2e-3, seed=13)
    _, history = train(model, x, cfg)
    bpds = [v for (_, _, metric, v) in history if metric == "bpd"]
    assert bpds[-1] < bpds[0]


def test_train_deterministic_given_seed():
    cfg = ModelConfig(variant="conv", input_shape=(1, 4, 4), num_scales=1,
                      steps_per_scale=1, hidden_width=2, seed=3)
    x = smooth_batchset(32, (1, 4, 4), seed=4)
    histories = []
    for _ in range(2):
        model = build_variant(cfg)
        _, h = train(model, x, TrainConfig(epochs=2, batch_size=8, seed=21))
        histories.append(h)
    assert histories[0] == histories[1]


def test_train_with_outlier_loss_pushes_down_general_logp():
    """Same data and seeds, with vs without the outlier term: the extra term
    must lower the trained model's likelihood on the general samples."""
    shape = (1, 4, 4)
    x_in = smooth_batchset(64, shape, seed=31)
    from flowad.data import gen_synthetic
    from flowad.evaluation import preprocess_train

    x_gen = preprocess_train(gen_synthetic("textured", 64, shape, seed=32).images)
    general = randomized(small_model(shape=shape, scales=1, steps=1, hidden=2), seed=33)

    def run(loss_kind):
        model = small_model(shape=shape, scales=1, steps=1, hidden=2, seed=35)
        cfg = TrainConfig(epochs=10, batch_size=16, loss=loss_kind, temperature=50.0,
                          outlier_weight=500.0, seed=37, dequantize=False)
        train(model, x_in, cfg, general_x=x_gen if loss_kind != "nll_only" else None,
              general_model=general if loss_kind != "nll_only" else None)
        return float(np.mean(model.log_prob(x_gen)))

    assert run("nll_plus_outlier") < run("nll_only")


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_skipbatch_leaves_parameters_and_optimizer_untouched():
    """A stub whose log-probs are all -inf must trigger SkipBatch every batch."""
    model = randomized(small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2), seed=41)
    # scale so large that z*z overflows to inf => log p = -inf, honestly
    an = model.actnorm_layers()[0]
    an.scale.assign(np.full(an.log_scale_shape, 1e200))
    x = smooth_batchset(16, (1, 4, 4), seed=42)
    assert np.all(np.isinf(model.log_prob(x)))
    before = [p.value.data.copy() for p in model.parameters()]
    _, history = train(model, x, TrainConfig(epochs=1, batch_size=8, dequantize=False))
    for p, b in zip(model.parameters(), before):
        np.testing.assert_array_equal(p.value.data, b)
    skipped = [v for (_, _, m, v) in history if m == "skipped_batches"]
    assert skipped == [2.0]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_partial_nonfinite_batch_trains_on_survivors():
    model = randomized(small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2), seed=43)
    x = smooth_batchset(8, (1, 4, 4), seed=44)
    x[0] = 1e160  # one absurd example -> -inf log p, dropped; 7 survive
    logps = model.log_prob(x)
    assert np.isinf(logps[0]) and np.all(np.isfinite(logps[1:]))
    before = [p.value.data.copy() for p in model.parameters()]
    _, history = train(model, x, TrainConfig(epochs=1, batch_size=8, dequantize=False))
    changed = any(
        not np.array_equal(p.value.data, b) for p, b in zip(model.parameters(), before)
    )
    assert changed
    assert [v for (_, _, m, v) in history if m == "skipped_batches"] == [0.0]


def test_supervised_training_with_mixture_prior():
    """Labeled nll + per-mode negatives push each example toward its own mode.

    With zero-initialized means the own-vs-other margin starts at exactly 0;
    after training it must be clearly positive and the modes must have moved.
    """
    shape = (1, 4, 4)
    smooth = smooth_batchset(40, shape, seed=51)
    from flowad.data import gen_synthetic
    from flowad.evaluation import preprocess_train

    textured = preprocess_train(gen_synthetic("textured", 40, shape, seed=52).images)
    x = np.concatenate([smooth, textured])
    labels = np.array([0] * 40 + [1] * 40)
    model = small_model(shape=shape, scales=1, steps=1, hidden=2, seed=53,
                        prior="gaussian_mixture", num_classes=2)
    general = randomized(small_model(shape=shape, scales=1, steps=1, hidden=2), seed=54)
    cfg = TrainConfig(epochs=25, batch_size=20, loss="nll_plus_outlier",
                      temperature=5.0, outlier_weight=20.0, learning_rate=3e-3,
                      seed=55, dequantize=False)
    train(model, x, cfg, general_x=x, general_model=general, labels=labels)
    per_class = model.log_prob_per_class(x)
    own = per_class[np.arange(80), labels]
    other = per_class[np.arange(80), 1 - labels]
    assert np.mean(own - other) > 0.05
    assert np.mean(own > other) > 0.5
    mode_norms = np.linalg.norm(model.prior.means.value.data, axis=1)
    assert (mode_norms > 0.01).all()


def test_supervised_training_requires_mixture_prior():
    model = small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2)
    x = smooth_batchset(8, (1, 4, 4), 0)
    with pytest.raises(ConfigError):
        train(model, x, TrainConfig(epochs=1), labels=np.zeros(8, dtype=int))


def test_actnorm_initializes_on_first_batch():
    model = small_model(shape=(1, 4, 4), scales=1, steps=1, hidden=2, seed=45)
    assert not model.actnorm_layers()[0].initialized
    x = smooth_batchset(16, (1, 4, 4), seed=46)
    train(model, x, TrainConfig(epochs=1, batch_size=8, seed=47))
    assert model.actnorm_layers()[0].initialized


def test_history_roundtrip(tmp_path):
    rows = [(0, "meta", "seed", 3.0), (1, "train", "nll", 1.25), (1, "train", "bpd", 8.5)]
    path = tmp_path / "history.txt"
    write_history(rows, path, header_lines=["config_sha256=abc", "seed=3"])
    assert read_history(path) == rows
    text = path.read_text()
    assert text.startswith("# config_sha256=abc")


def test_augment_translate_zero_fill(rng):
    x = np.ones((4, 1, 6, 6))
    out = augment_batch(x, np.random.default_rng(0), translate=2)
    assert out.shape == x.shape
    assert out.max() == 1.0
    assert (out.sum(axis=(1, 2, 3)) <= 36.0).all()  # zero fill only removes mass


def test_augment_flip_only_mirrors(rng):
    x = rng.standard_normal((8, 1, 4, 4))
    out = augment_batch(x, np.random.default_rng(1), flip=True)
    for i in range(8):
        same = np.array_equal(out[i], x[i])
        mirrored = np.array_equal(out[i], x[i][..., ::-1])
        assert same or mirrored


def test_dequantize_range(rng):
    x = np.zeros((4, 1, 3, 3))
    noisy = dequantize_batch(x, np.random.default_rng(2))
    assert (noisy >= 0.0).all() and (noisy < 1.0 / 256.0).all()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(outlier_weight=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="bogus")
