"""Retrain without the most (or randomly chosen) influential examples per query."""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from src.diffusion.measurements import measure
from src.evaluation.retraining import TrainSetup, fit_or_none
from src.influence.prediction import top_k
from src.influence.scores import ScoreMatrix, per_query_measurements
from src.utils.errors import ConfigurationError, UnknownIndexError
from src.utils.parallel import ordered_map
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemovalResult:
    removed: list[np.ndarray]  # dataset positions removed per query
    base: np.ndarray  # (Q,) measurement of the model trained on everything
    retrained: np.ndarray  # (Q,) NaN where retraining diverged

    @property
    def deltas(self) -> np.ndarray:
        return self.retrained - self.base

    def to_frame(self, method: str, percent: float) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "query": np.arange(len(self.base)),
                "method": method,
                "percent": percent,
                "removed": [len(r) for r in self.removed],
                "base": self.base,
                "retrained": self.retrained,
                "delta": self.deltas,
            }
        )


def removal_count(percent: float, N: int) -> int:
    if not 0 <= percent < 100:
        raise ConfigurationError("removal percent must lie in [0, 100)", [("evaluation.percent", str(percent))])
    return math.ceil(percent * N / 100)


def _retrain_without(
    setup: TrainSetup,
    removals: Sequence[np.ndarray],
    queries: Sequence,
    measurement,
    workers: int,
) -> RemovalResult:
    fns = per_query_measurements(measurement, len(queries))
    N = len(setup.dataset)
    base_net = setup.fit(None, setup.seed)
    base = np.array([measure(base_net, setup.schedule, fns[q], queries[q]) for q in range(len(queries))])

    def job(q: int) -> float:
        weights = np.ones(N)
        weights[removals[q]] = 0.0
        net = fit_or_none(setup, weights, setup.seed, subset=False)
        if net is None:
            return float("nan")
        return measure(net, setup.schedule, fns[q], queries[q])

    retrained = np.array(ordered_map(job, range(len(queries)), workers=workers, desc="remove-retrain"))
    return RemovalResult(list(removals), base, retrained)


def remove_top_and_retrain(
    sm: ScoreMatrix,
    percent: float,
    setup: TrainSetup,
    queries: Sequence,
    measurement,
    workers: int = 1,
) -> RemovalResult:
    """Per query, drop the highest-scoring ceil(percent * N / 100) examples and retrain."""
    N = len(setup.dataset)
    n_remove = removal_count(percent, N)
    position = {int(j): pos for pos, j in enumerate(setup.dataset.ids)}
    removals = []
    for q in range(sm.shape[0]):
        chosen = sm.train_ids[top_k(sm.scores[q], n_remove)]
        missing = [int(j) for j in chosen if int(j) not in position]
        if missing:
            raise UnknownIndexError(f"training indices {missing} are not in the training set")
        removals.append(np.array([position[int(j)] for j in chosen], dtype=np.int64))
    logger.info("Removing the top %d of %d examples per query", n_remove, N)
    return _retrain_without(setup, removals, queries, measurement, workers)


def remove_random_and_retrain(
    percent: float,
    setup: TrainSetup,
    queries: Sequence,
    measurement,
    seed: int,
    workers: int = 1,
) -> RemovalResult:
    """Same removal budget as the top-k ablation, with a seeded random selection per query."""
    N = len(setup.dataset)
    n_remove = removal_count(percent, N)
    stream = RngStream(seed).child("remove_random")
    removals = [
        np.sort(stream.child(q).generator().choice(N, size=n_remove, replace=False))
        for q in range(len(queries))
    ]
    return _retrain_without(setup, removals, queries, measurement, workers)
