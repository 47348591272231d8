import logging
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import linalg

from src.data.toy import Dataset, as_dataset
from src.diffusion.process import q_sample
from src.diffusion.schedule import NoiseSchedule
from src.nn.gradients import draw_samples, sq_loss_batch
from src.nn.layers import Dense, augment
from src.nn.network import EpsilonNet, time_embedding
from src.nn.optim import make_optimizer
from src.utils.errors import ConfigurationError, TrainingDivergedError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

SAMPLERS = ("weighted", "strict")


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    # "weighted": uniform over all examples, loss scaled by w_n.
    # "strict": uniform over {n : w_n > 0}, so zero weights behave exactly like removal.
    sampler: str = "weighted"
    log_every: int = 100

    @classmethod
    def from_any(cls, config: Any) -> "OptimizerConfig":
        if isinstance(config, cls):
            return config
        if hasattr(config, "model_dump"):
            config = config.model_dump()
        if not isinstance(config, Mapping):
            raise ConfigurationError(f"Unsupported optimizer config: {type(config)}")
        known = {k: v for k, v in config.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _check_weights(weights: np.ndarray, n: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ConfigurationError(f"Need {n} example weights, got shape {weights.shape}")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ConfigurationError("example weights must lie in [0, 1]")
    if not np.any(weights > 0):
        raise ConfigurationError("at least one example weight must be positive")
    return weights


def train(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    example_weights: np.ndarray | None,
    optimizer_config: Any,
    steps: int,
    seed: int,
) -> tuple[EpsilonNet, list[tuple[int, float]]]:
    """Minimise (1/N) Σ_n w_n ℓ(θ, x_n) by minibatch optimisation.

    Returns the trained network and the mean training loss per logging interval
    as (last step, mean loss) pairs.
    """
    dataset = as_dataset(dataset)
    cfg = OptimizerConfig.from_any(optimizer_config)
    if cfg.sampler not in SAMPLERS:
        raise ConfigurationError(f"Unknown sampler {cfg.sampler!r}")
    n = len(dataset)
    weights = _check_weights(np.ones(n) if example_weights is None else example_weights, n)
    support = np.flatnonzero(weights > 0) if cfg.sampler == "strict" else np.arange(n)

    optimizer = make_optimizer(cfg.name, cfg.lr, cfg.momentum, (cfg.beta1, cfg.beta2))
    params = net.flat_params()
    stream = RngStream(seed).child("train")
    batch = cfg.batch_size
    curve: list[tuple[int, float]] = []
    window: list[float] = []

    for step in range(steps):
        rng = stream.child("step", step).generator()
        idx = support[rng.integers(0, len(support), size=batch)]
        eps = rng.standard_normal((batch, dataset.data_dim))
        ts = rng.integers(1, schedule.T + 1, size=batch)
        x_t = q_sample(schedule, dataset.points[idx], ts, eps)
        w = weights[idx]

        current = net.with_flat_params(params)
        values, grad, _ = sq_loss_batch(current, x_t, ts, eps, w / batch)
        loss = float(np.mean(w * values))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(step, loss)
        params = optimizer.step(params, grad)

        window.append(loss)
        if (step + 1) % cfg.log_every == 0 or step + 1 == steps:
            curve.append((step + 1, float(np.mean(window))))
            window = []
            logger.debug("step %d: loss %.5f", step + 1, curve[-1][1])

    trained = net.with_flat_params(params)
    if curve:
        logger.info("Trained %d steps: loss %.4f -> %.4f", steps, curve[0][1], curve[-1][1])
    return trained, curve


def frozen_design(
    net: EpsilonNet, schedule: NoiseSchedule, dataset: Dataset, S: int, stream: RngStream
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack every frozen MC sample as (augmented input, target, example position)."""
    rows, targets, owners = [], [], []
    for pos, (x0, example_id) in enumerate(zip(dataset.points, dataset.ids)):
        ts, eps = draw_samples(schedule, x0, stream.child("example", int(example_id)), S)
        x_t = q_sample(schedule, np.broadcast_to(x0, eps.shape), ts, eps)
        h = np.concatenate([x_t, time_embedding(ts, net.time_embed_dim)], axis=1)
        rows.append(augment(h))
        targets.append(eps)
        owners.append(np.full(S, pos))
    return np.concatenate(rows), np.concatenate(targets), np.concatenate(owners)


def solve_weighted_optimum(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    example_weights: np.ndarray | None,
    S: int,
    stream: RngStream,
    ridge: float = 0.0,
) -> EpsilonNet:
    """Exact minimiser of the frozen-sample weighted loss for a single identity Dense layer."""
    dataset = as_dataset(dataset)
    if len(net.layers) != 1 or not isinstance(net.layers[0], Dense) or net.layers[0].activation != "identity":
        raise ConfigurationError("closed-form optimum needs a single identity Dense layer")
    weights = np.ones(len(dataset)) if example_weights is None else np.asarray(example_weights, dtype=np.float64)

    design, targets, owners = frozen_design(net, schedule, dataset, S, stream)
    c = weights[owners] / (len(dataset) * S)
    gram = design.T @ (c[:, None] * design) + ridge * np.eye(design.shape[1])
    rhs = design.T @ (c[:, None] * targets)
    block = linalg.solve(gram, rhs, assume_a="pos")
    return net.with_flat_params(block.ravel())
