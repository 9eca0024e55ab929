"""Shared oracles: central finite differences for gradients and dense
numerical Jacobians, plus small model factories."""

import numpy as np
import pytest

from flowad.models import ModelConfig, build_variant, randomize_model

FD_H = 1e-5
GRAD_RTOL = 1e-4


def fd_gradient(f, arr, h=FD_H):
    """Central-difference gradient of scalar f() w.r.t. the array it reads."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_error(analytic, numeric):
    """Relative error denominated by max(1, |analytic|), elementwise max."""
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_jacobian(fn, x, h=FD_H):
    """Dense numerical Jacobian of a vector map fn(flat) -> flat."""
    x = x.ravel().copy()
    d = x.size
    cols = []
    for i in range(d):
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


def logdet_of(jac):
    sign, lad = np.linalg.slogdet(jac)
    assert sign != 0.0
    return lad


def small_model(variant="conv", shape=(2, 4, 4), scales=1, steps=1, hidden=4, seed=0, **kw):
    cfg = ModelConfig(
        variant=variant,
        input_shape=shape,
        num_scales=scales,
        steps_per_scale=steps,
        hidden_width=hidden,
        seed=seed,
        **kw,
    )
    return build_variant(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def randomized(model, seed=0, spread=0.1):
    randomize_model(model, np.random.default_rng(seed), spread=spread)
    return model
