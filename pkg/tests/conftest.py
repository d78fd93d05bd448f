"""Shared fixtures: small random models and batches."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cnsc.data import Cohort
from cnsc.model import CnscModel, Normalizer
from cnsc.nn import seeded_rng

settings.register_profile("ci", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_model(seed, n_cov=3, k=2, latent=3, depth=1, width=4, time_scale=1.0):
    """Small model with non-trivial biases and a non-identity normaliser."""
    rng = seeded_rng(seed, 9000)
    model = CnscModel.build(n_cov, k, latent_dim=latent, depth=depth, width=width, seed=seed)
    for net in (model.G, model.W, model.M.mlp):
        for layer in net.layers:
            layer.weight[...] = rng.normal(0.0, 0.8, layer.weight.shape)
            layer.bias[...] = rng.normal(0.0, 0.5, layer.bias.shape)
    model.normalizer = Normalizer(rng.normal(size=n_cov), rng.uniform(0.5, 2.0, n_cov), time_scale)
    return model


def random_batch(seed, n=8, n_cov=3, t_max=2.0):
    rng = seeded_rng(seed, 9001)
    return Cohort(
        rng.normal(size=(n, n_cov)),
        rng.uniform(0.05, t_max, n),
        rng.integers(0, 2, n),
        rng.integers(0, 2, n),
    )


@pytest.fixture
def model():
    return random_model(0)


@pytest.fixture
def batch():
    return random_batch(0)
