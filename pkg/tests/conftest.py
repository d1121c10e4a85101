"""Shared fixtures: small panels, datasets and random networks."""

import numpy as np
import pytest

from data import gen_het_panel, gen_linear2
from nn_core import LayerSpec, NetworkParams


def random_network(rng, n_inputs, hidden, activation="tanh", weight_scale=1.0):
    """Network with N(0, scale^2) weights and N(0, 0.25) biases."""
    dims = [n_inputs, *hidden, 1]
    layers = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else "identity"
        layers.append(LayerSpec(
            weight_scale * rng.standard_normal((dims[i + 1], dims[i])),
            0.5 * rng.standard_normal(dims[i + 1]),
            act,
        ))
    return NetworkParams(tuple(layers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_network():
    return random_network


@pytest.fixture
def small_panel():
    return gen_het_panel(T=8, N=12, K=3, noise_profile="linear", seed=3)


@pytest.fixture
def linear_data():
    return gen_linear2(200, seed=11, noise_sigma=0.1)


@pytest.fixture
def panel_csv(tmp_path):
    """Write panel CSV text to a file and return its path."""
    def write(text, name="panel.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return write
