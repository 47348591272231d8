import math

import numpy as np

from src.utils.errors import ConfigurationError
from src.utils.rng import RngStream


def sample_subsets(N: int, M: int, fraction: float, seed: int) -> list[np.ndarray]:
    """M seeded draws of floor(N * fraction) distinct, sorted indices."""
    if not 0 < fraction < 1:
        raise ConfigurationError("subset fraction must lie in (0, 1)", [("evaluation.fraction", str(fraction))])
    if M < 1:
        raise ConfigurationError("need at least one subset", [("evaluation.M", str(M))])
    size = math.floor(N * fraction)
    stream = RngStream(seed).child("subsets")
    return [
        np.sort(stream.child(i).generator().choice(N, size=size, replace=False))
        for i in range(M)
    ]


def subset_weights(subset: np.ndarray, N: int, downweight_fraction: float = 1.0) -> np.ndarray:
    """Example weights for training on ``subset``: the complement keeps 1 - downweight_fraction."""
    weights = np.full(N, 1.0 - downweight_fraction)
    weights[np.asarray(subset, dtype=np.int64)] = 1.0
    return weights
