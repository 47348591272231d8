"""Retraining ground truth: models trained from scratch on reweighted data."""

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from src.data.toy import Dataset
from src.diffusion.measurements import MeasurementFn, measure
from src.diffusion.schedule import NoiseSchedule
from src.evaluation.subsets import subset_weights
from src.influence.scores import per_query_measurements
from src.nn.network import EpsilonNet, build_network
from src.nn.training import OptimizerConfig, train
from src.utils.errors import TrainingDivergedError
from src.utils.parallel import ordered_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSetup:
    """Everything needed to train a model from scratch.

    ``subset_steps`` is the step budget for retrained subset models; by default
    it equals ``steps``.
    """

    arch: dict
    schedule: NoiseSchedule
    dataset: Dataset
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 1000
    seed: int = 0
    subset_steps: int | None = None

    def fit(self, weights: np.ndarray | None = None, seed: int | None = None, steps: int | None = None) -> EpsilonNet:
        seed = self.seed if seed is None else seed
        net = build_network(self.arch, seed)
        trained, _ = train(
            net, self.schedule, self.dataset, weights, self.optimizer, steps or self.steps, seed
        )
        return trained

    def fit_subset(self, weights: np.ndarray, seed: int) -> EpsilonNet:
        return self.fit(weights, seed, self.subset_steps or self.steps)


def fit_or_none(setup: TrainSetup, weights: np.ndarray | None, seed: int, subset: bool) -> EpsilonNet | None:
    try:
        return setup.fit_subset(weights, seed) if subset else setup.fit(weights, seed)
    except TrainingDivergedError as exc:
        logger.warning("Retraining with seed %d diverged at step %d", seed, exc.step)
        return None


def weight_vectors(selections: Sequence, N: int, downweight_fraction: float = 1.0) -> list[np.ndarray]:
    """Accept index subsets or ready-made length-N weight vectors."""
    out = []
    for sel in selections:
        sel = np.asarray(sel)
        if sel.dtype.kind == "f" and sel.shape == (N,):
            out.append(sel.astype(np.float64))
        else:
            out.append(subset_weights(sel, N, downweight_fraction))
    return out


def train_subset_models(
    setup: TrainSetup,
    weights: Sequence[np.ndarray],
    K: int,
    workers: int = 1,
    progress: bool = False,
) -> list[list[EpsilonNet | None]]:
    """models[i][k] trained on weights[i] with seed ``setup.seed + k``; None if it diverged."""
    jobs = [(i, k) for i in range(len(weights)) for k in range(K)]

    def job(pair: tuple[int, int]) -> EpsilonNet | None:
        i, k = pair
        return fit_or_none(setup, weights[i], setup.seed + k, subset=True)

    logger.info("Retraining %d subsets x %d seeds", len(weights), K)
    flat = ordered_map(job, jobs, workers=workers, desc="retrain", progress=progress)
    return [flat[i * K:(i + 1) * K] for i in range(len(weights))]


def measure_models(
    models: Sequence[Sequence[EpsilonNet | None]],
    schedule: NoiseSchedule,
    queries: Sequence,
    fns: Sequence[MeasurementFn],
) -> np.ndarray:
    """(M, K, Q) measurements; diverged models give NaN rows."""
    M, K = len(models), len(models[0]) if models else 0
    out = np.full((M, K, len(queries)), np.nan)
    for i, row in enumerate(models):
        for k, net in enumerate(row):
            if net is None:
                continue
            out[i, k] = [measure(net, schedule, fns[q], queries[q]) for q in range(len(queries))]
    return out


def retrain_oracle(
    setup: TrainSetup,
    selections: Sequence,
    K: int,
    queries: Sequence,
    measurement,
    downweight_fraction: float = 1.0,
    workers: int = 1,
    progress: bool = False,
) -> np.ndarray:
    """M x K x Q measurements of retrained models, one fixed stream per query shared by all models."""
    fns = per_query_measurements(measurement, len(queries))
    weights = weight_vectors(selections, len(setup.dataset), downweight_fraction)
    models = train_subset_models(setup, weights, K, workers, progress)
    oracle = measure_models(models, setup.schedule, queries, fns)
    missing = int(np.isnan(oracle).any(axis=2).sum())
    if missing:
        logger.warning("%d of %d retraining runs diverged; their cells are NaN", missing, len(weights) * K)
    return oracle


def exact_retraining_predictor(
    setup: TrainSetup,
    selections: Sequence,
    queries: Sequence,
    measurement,
    seed: int | None = None,
    downweight_fraction: float = 1.0,
    workers: int = 1,
) -> np.ndarray:
    """(M, Q) measurements of a single retrain per subset."""
    seed = setup.seed if seed is None else seed
    shifted = replace(setup, seed=seed)
    return retrain_oracle(shifted, selections, 1, queries, measurement, downweight_fraction, workers)[:, 0, :]
