"""Measurement functions m(θ, x) used as proxies for a sample's log-probability.

Every measurement is expanded into weighted squared-error terms
``Σ_k w_k ‖target_k - ε_θ(x_k, t_k)‖² + constant``, so a single forward/backward
routine serves values and gradients of all kinds.
"""

from dataclasses import dataclass, replace

import numpy as np

from src.diffusion.process import posterior_coefficient, q_sample
from src.diffusion.sampling import Trajectory
from src.diffusion.schedule import NoiseSchedule
from src.nn.gradients import draw_samples, sq_loss_batch
from src.nn.network import EpsilonNet
from src.utils.errors import ConfigurationError, PayloadError
from src.utils.rng import RngStream

SIMPLE_LOSS = "simple_loss"
ELBO = "elbo"
TRAJECTORY_LOG_PROB = "trajectory_log_prob"
PER_TIMESTEP_LOSS = "per_timestep_loss"
SQUARE_NORM = "square_norm"

KINDS = (SIMPLE_LOSS, ELBO, TRAJECTORY_LOG_PROB, PER_TIMESTEP_LOSS, SQUARE_NORM)

DEFAULT_SAMPLES = 250


@dataclass(frozen=True)
class MeasurementFn:
    kind: str
    S: int = DEFAULT_SAMPLES
    stream: RngStream = RngStream(0)
    t: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"Unknown measurement kind: {self.kind!r}")
        if self.S < 1:
            raise ConfigurationError("measurement S must be >= 1")
        if self.kind == PER_TIMESTEP_LOSS and (self.t is None or self.t < 1):
            raise ConfigurationError("per_timestep_loss needs a timestep t >= 1")

    def for_query(self, index: int) -> "MeasurementFn":
        return replace(self, stream=self.stream.child("query", index))

    def describe(self) -> dict:
        return {"kind": self.kind, "S": self.S, "t": self.t, "stream": self.stream.describe()}


@dataclass(frozen=True)
class MeasurementTerms:
    x_t: np.ndarray
    t: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    constant: float = 0.0


def _mc_terms(schedule, x0, stream, S, t=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x0 = np.asarray(x0, dtype=np.float64)
    ts, eps = draw_samples(schedule, x0, stream, S, t)
    return q_sample(schedule, np.broadcast_to(x0, eps.shape), ts, eps), ts, eps


def measurement_terms(schedule: NoiseSchedule, fn: MeasurementFn, query) -> MeasurementTerms:
    if fn.kind == TRAJECTORY_LOG_PROB:
        if not isinstance(query, Trajectory):
            raise PayloadError("trajectory_log_prob needs a recorded Trajectory as its query")
        return _trajectory_terms(schedule, query)
    if isinstance(query, Trajectory):
        query = query.sample
    if fn.kind == PER_TIMESTEP_LOSS and fn.t > schedule.T:
        raise ConfigurationError(f"timestep {fn.t} outside 1..{schedule.T}")

    t = fn.t if fn.kind == PER_TIMESTEP_LOSS else None
    x_t, ts, eps = _mc_terms(schedule, query, fn.stream, fn.S, t)
    weight = np.full(fn.S, 1.0 / fn.S)
    if fn.kind == ELBO:
        weight = weight * schedule.T * schedule.elbo_weight[ts - 1]
    if fn.kind == SQUARE_NORM:
        eps = np.zeros_like(eps)
    return MeasurementTerms(x_t, ts, eps, weight)


def _trajectory_terms(schedule: NoiseSchedule, trajectory: Trajectory) -> MeasurementTerms:
    if trajectory.T != schedule.T:
        raise PayloadError(f"trajectory has T={trajectory.T}, schedule has T={schedule.T}")
    d = trajectory.states.shape[1]
    x_T = trajectory.state(schedule.T)
    constant = -0.5 * float(x_T @ x_T) - 0.5 * d * np.log(2 * np.pi)

    ts = np.arange(2, schedule.T + 1)
    if ts.size == 0:
        return MeasurementTerms(np.zeros((0, d)), ts, np.zeros((0, d)), np.zeros(0), constant)
    x_t = np.stack([trajectory.state(t) for t in ts])
    x_prev = np.stack([trajectory.state(t - 1) for t in ts])
    lam = schedule.lam(ts)
    coef = posterior_coefficient(schedule, ts)
    sigma_sq = schedule.sig(ts) ** 2
    # x^(t-1) - μ = (c_t / λ_t) (ε_θ - target_t)
    target = (x_t - lam[:, None] * x_prev) / coef[:, None]
    weight = -(coef**2) / (2.0 * lam**2 * sigma_sq)
    constant += float(np.sum(-0.5 * d * np.log(2 * np.pi * sigma_sq)))
    return MeasurementTerms(x_t, ts, target, weight, constant)


def evaluate_terms(net: EpsilonNet, terms: MeasurementTerms, with_grad: bool = False):
    if terms.t.size == 0:
        grad = np.zeros(net.param_count)
        return (terms.constant, grad) if with_grad else terms.constant
    values, grad, _ = sq_loss_batch(net, terms.x_t, terms.t, terms.target, terms.weight)
    value = float(terms.weight @ values) + terms.constant
    return (value, grad) if with_grad else value


def measure(net: EpsilonNet, schedule: NoiseSchedule, fn: MeasurementFn, query) -> float:
    return evaluate_terms(net, measurement_terms(schedule, fn, query))


def per_timestep_loss(
    net: EpsilonNet, schedule: NoiseSchedule, x0: np.ndarray, t: int, S: int, stream: RngStream
) -> float:
    return measure(net, schedule, MeasurementFn(PER_TIMESTEP_LOSS, S, stream, t), x0)


def diffusion_loss(
    net: EpsilonNet, schedule: NoiseSchedule, x0: np.ndarray, S: int, stream: RngStream
) -> float:
    return measure(net, schedule, MeasurementFn(SIMPLE_LOSS, S, stream), x0)
