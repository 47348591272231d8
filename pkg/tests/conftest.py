import numpy as np
import pytest

from src.data.toy import gaussian_mixture
from src.diffusion.schedule import make_schedule
from src.nn.network import build_network
from src.utils.rng import RngStream

SMALL_ARCH = {
    "data_dim": 2,
    "time_embed_dim": 2,
    "layers": [
        {"kind": "dense", "out_dim": 4, "activation": "silu"},
        {"kind": "dense", "out_dim": 2, "activation": "identity"},
    ],
}

LINEAR_ARCH = {
    "data_dim": 2,
    "time_embed_dim": 2,
    "layers": [
        {"kind": "dense", "out_dim": 3, "activation": "identity"},
        {"kind": "dense", "out_dim": 2, "activation": "identity"},
    ],
}


@pytest.fixture
def schedule():
    return make_schedule(10, 1e-3, 0.2)


@pytest.fixture
def net():
    return build_network(SMALL_ARCH, seed=3)


@pytest.fixture
def linear_net():
    return build_network(LINEAR_ARCH, seed=5)


@pytest.fixture
def dataset():
    return gaussian_mixture(8, data_dim=2, seed=1)


@pytest.fixture
def stream():
    return RngStream(11).child("test")


def central_difference(fn, params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.empty_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = h
        grad[i] = (fn(params + step) - fn(params - step)) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
