import logging
from dataclasses import dataclass

import numpy as np

from src.utils.errors import ConfigurationError, ScheduleError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``t - 1`` for t = 1..T."""

    T: int
    lambdas: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    elbo_weight: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        if betas.size == 0 or np.any(betas < 0) or np.any(betas >= 1):
            raise ConfigurationError("betas must be a non-empty array in [0, 1)")
        lambdas = np.sqrt(1.0 - betas)
        alpha_bar = np.cumprod(lambdas**2)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        one_minus = 1.0 - alpha_bar
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma_sq = np.where(
                one_minus > 0, (1.0 - alpha_bar_prev) / one_minus * (1.0 - lambdas**2), 0.0
            )
        sigma = np.sqrt(np.clip(sigma_sq, 0.0, None))
        partial = cls(len(betas), lambdas, alpha_bar, sigma, np.ones_like(betas))
        return cls(len(betas), lambdas, alpha_bar, sigma, elbo_weights(partial))

    def lam(self, t) -> np.ndarray:
        return self.lambdas[np.asarray(t) - 1]

    def abar(self, t) -> np.ndarray:
        return self.alpha_bar[np.asarray(t) - 1]

    def sig(self, t) -> np.ndarray:
        return self.sigma[np.asarray(t) - 1]

    def validate(self) -> None:
        if not np.all((self.lambdas > 0) & (self.lambdas < 1)):
            raise ConfigurationError("schedule lambdas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0) or not np.all(
            (self.alpha_bar > 0) & (self.alpha_bar <= 1)
        ):
            raise ConfigurationError("alpha_bar must be strictly decreasing within (0, 1]")
        if self.T >= 2 and not np.all(self.sigma[1:] > 0):
            raise ConfigurationError("sampler sigma must be positive for t >= 2")
        if not np.all(np.isfinite(self.elbo_weight) & (self.elbo_weight > 0)):
            raise ConfigurationError("ELBO weights must be finite and positive")

    def describe(self) -> dict:
        return {"T": self.T, "beta": (1.0 - self.lambdas**2).tolist()}


def make_schedule(T: int, beta_min: float, beta_max: float, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigurationError(f"Unsupported schedule kind: {kind!r}")
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ConfigurationError(
            f"Need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    schedule = NoiseSchedule.from_betas(betas)
    schedule.validate()
    logger.info("Linear schedule: T=%d, alpha_bar_T=%.4g", T, schedule.alpha_bar[-1])
    return schedule


def elbo_weights(schedule: NoiseSchedule) -> np.ndarray:
    """Per-timestep weights turning the simple loss into the (reweighted) ELBO.

    w_t = (1 - λ_t²)² / (2 σ_t² λ_t² (1 - ᾱ_t)) for t >= 2 and w_1 := w_2.
    """
    T = schedule.T
    if T == 1:
        return np.ones(1)
    lam_sq = schedule.lambdas[1:] ** 2
    sigma_sq = schedule.sigma[1:] ** 2
    if np.any(sigma_sq <= 0):
        bad = int(np.argmax(sigma_sq <= 0)) + 2
        raise ScheduleError(f"sigma_t = 0 at t={bad}; ELBO weight undefined")
    w = (1.0 - lam_sq) ** 2 / (2.0 * sigma_sq * lam_sq * (1.0 - schedule.alpha_bar[1:]))
    return np.concatenate([[w[0]], w])
