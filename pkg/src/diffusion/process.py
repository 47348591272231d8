import numpy as np

from src.diffusion.schedule import NoiseSchedule
from src.utils.errors import ScheduleError


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """x_t = √ᾱ_t x0 + √(1 - ᾱ_t) eps; ``t`` may be a scalar or one step per row."""
    abar = np.asarray(schedule.abar(t), dtype=np.float64)
    if abar.ndim:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def posterior_mean(schedule: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    lam = np.asarray(schedule.lam(t), dtype=np.float64)
    abar = np.asarray(schedule.abar(t), dtype=np.float64)
    if np.any(lam == 0):
        raise ScheduleError(f"lambda_t = 0 at t={t}")
    if lam.ndim:
        lam, abar = lam[:, None], abar[:, None]
    coef = np.divide(1.0 - lam**2, np.sqrt(1.0 - abar), out=np.zeros_like(abar), where=abar < 1)
    return (x_t - coef * eps) / lam


def posterior_coefficient(schedule: NoiseSchedule, t) -> np.ndarray:
    """c_t with μ = (x_t - c_t ε) / λ_t."""
    lam = schedule.lam(t)
    abar = schedule.abar(t)
    return (1.0 - lam**2) / np.sqrt(1.0 - abar)
