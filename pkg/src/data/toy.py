import logging
from dataclasses import dataclass

import numpy as np

from src.utils.errors import ConfigurationError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Training points with stable ids (ids key per-example random streams)."""

    points: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (points.shape[0],):
            raise ConfigurationError(
                f"Dataset has {points.shape[0]} points but {ids.shape} ids"
            )
        if len(np.unique(ids)) != len(ids):
            raise ConfigurationError("Dataset ids must be unique")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_points(cls, points) -> "Dataset":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(points=points, ids=np.arange(points.shape[0]))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def data_dim(self) -> int:
        return self.points.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(points=self.points[indices], ids=self.ids[indices])

    def permuted(self, order) -> "Dataset":
        return self.subset(order)


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    return Dataset.from_points(data)


def gaussian_mixture(
    n: int,
    data_dim: int = 2,
    n_components: int = 2,
    spread: float = 1.5,
    std: float = 0.5,
    seed: int = 0,
) -> Dataset:
    if n < 1 or data_dim < 1 or n_components < 1:
        raise ConfigurationError("gaussian_mixture needs n, data_dim, n_components >= 1")
    rng = RngStream(seed).child("dataset", "gaussian_mixture").generator()

    # components alternate around the origin along the all-ones direction
    direction = spread * np.ones(data_dim)
    means = np.stack(
        [direction * (1.0 if k % 2 == 0 else -1.0) * (1 + k // 2) for k in range(n_components)]
    )
    labels = rng.integers(0, n_components, size=n)
    points = means[labels] + std * rng.standard_normal((n, data_dim))
    logger.info("Generated gaussian mixture: n=%d, dim=%d, components=%d", n, data_dim, n_components)
    return Dataset.from_points(points)


def gaussian(n: int, data_dim: int = 2, mean: float = 0.0, std: float = 1.0, seed: int = 0) -> Dataset:
    rng = RngStream(seed).child("dataset", "gaussian").generator()
    points = mean + std * rng.standard_normal((n, data_dim))
    return Dataset.from_points(points)


GENERATORS = {
    "gaussian_mixture": gaussian_mixture,
    "gaussian": gaussian,
}


def make_dataset(kind: str, n: int, data_dim: int, seed: int, **kwargs) -> Dataset:
    try:
        generator = GENERATORS[kind]
    except KeyError:
        raise ConfigurationError(f"Unknown dataset generator: {kind!r}") from None
    return generator(n=n, data_dim=data_dim, seed=seed, **kwargs)
