import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from src.diffusion.process import posterior_mean
from src.diffusion.schedule import NoiseSchedule
from src.utils.errors import SamplingDivergedError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

# (x_t batch, t batch) -> predicted noise batch; EpsilonNet satisfies this.
Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Trajectory:
    """States x^(T), ..., x^(0) in sampling order, shape (T + 1, data_dim)."""

    states: np.ndarray
    seed: int

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    def state(self, t: int) -> np.ndarray:
        return self.states[self.T - t]

    @property
    def sample(self) -> np.ndarray:
        return self.states[-1]


def _sampling_noise(seed: int, T: int, data_dim: int) -> tuple[np.ndarray, np.ndarray]:
    stream = RngStream(seed).child("ddpm")
    prior = stream.child("prior").generator().standard_normal(data_dim)
    noise = stream.child("noise").generator().standard_normal((T, data_dim))
    return prior, noise


def ddpm_sample_batch(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    seeds: Sequence[int],
    data_dim: int,
    record: bool = False,
) -> tuple[np.ndarray, list[Trajectory] | None]:
    """Ancestral sampling with the "small" posterior variance, one seed per row."""
    seeds = [int(s) for s in seeds]
    draws = [_sampling_noise(s, schedule.T, data_dim) for s in seeds]
    x = np.stack([prior for prior, _ in draws])
    noise = np.stack([n for _, n in draws])  # (B, T, d), row t-1 holds z_t
    history = [x.copy()] if record else None

    for t in range(schedule.T, 0, -1):
        ts = np.full(len(seeds), t)
        eps = denoiser(x, ts)
        z = noise[:, t - 1, :] if t > 1 else np.zeros_like(x)
        x = posterior_mean(schedule, x, eps, t) + schedule.sig(t) * z
        if not np.all(np.isfinite(x)):
            raise SamplingDivergedError(t)
        if record:
            history.append(x.copy())

    trajectories = None
    if record:
        stacked = np.stack(history, axis=1)  # (B, T + 1, d)
        trajectories = [Trajectory(stacked[i], seeds[i]) for i in range(len(seeds))]
    return x, trajectories


def ddpm_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    seed: int,
    data_dim: int | None = None,
    record: bool = False,
) -> tuple[np.ndarray, Trajectory | None]:
    if data_dim is None:
        data_dim = denoiser.data_dim
    samples, trajectories = ddpm_sample_batch(denoiser, schedule, [seed], data_dim, record)
    return samples[0], (trajectories[0] if record else None)
