"""Shared helpers for building generic random test instances."""

import numpy as np
import pytest

from cozad.model_core import NoiseConfig, TRAINABLE_FIELDS, init_params


def randomized_params(feat_dim, adapted_dim, hidden_dim, seed, scale=0.5):
    """Fully random parameters (no identity structure) for gradient checks."""
    rng = np.random.default_rng(seed)
    p = init_params(feat_dim, adapted_dim, hidden_dim, seed)
    for name in TRAINABLE_FIELDS:
        arr = getattr(p, name)
        setattr(p, name, np.asarray(rng.normal(0.0, scale, arr.shape)))
    p.bn_running_mean = rng.normal(0.0, 0.1, hidden_dim)
    p.bn_running_var = rng.uniform(0.5, 1.5, hidden_dim)
    return p


def kink_clearance(params, batch, noise_seed, sigma, weights, th_pos=0.5, th_neg=0.5):
    """Distance of every hinge argument and pre-activation from its kink.

    Finite differences are only valid away from the non-smooth points of the
    hinges and the LeakyReLU; instances too close to a kink get redrawn.
    """
    from cozad.model_core import adaptor_forward, discriminator_forward, synth_anomaly

    p = params.copy()
    adapted = adaptor_forward(p, batch)
    noise = NoiseConfig.from_seed(sigma, noise_seed)
    negatives = synth_anomaly(adapted, noise)
    combined = np.vstack([adapted, negatives])
    z = combined @ p.disc_w1 + p.disc_b1
    mu = z.mean(axis=0)
    var = z.var(axis=0)
    z_hat = (z - mu) / np.sqrt(var + 1e-5)
    y = p.bn_gamma * z_hat + p.bn_beta
    scores, _ = discriminator_forward(p, combined, "train")
    b = batch.shape[0]
    margins = np.concatenate([
        np.abs(th_pos - scores[:b]),
        np.abs(scores[b:] + th_neg),
        np.abs(y).reshape(-1),
    ])
    return margins.min()


def generic_instance(index, feat_max=8, batch_max=6, min_clearance=2e-3):
    """Deterministically search for a kink-free random instance."""
    attempt = 0
    while True:
        seed = 1000 * index + attempt
        rng = np.random.default_rng(seed)
        f = int(rng.integers(2, feat_max + 1))
        d = int(rng.integers(2, feat_max + 1))
        h = int(rng.integers(2, feat_max + 1))
        b = int(rng.integers(2, batch_max + 1))
        params = randomized_params(f, d, h, seed)
        batch = rng.normal(size=(b, f))
        weights = rng.uniform(0.3, 1.0, b)
        if kink_clearance(params, batch, seed + 7, 0.05, weights) > min_clearance:
            return params, batch, weights, seed
        attempt += 1
        assert attempt < 200, "could not find a kink-free instance"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
