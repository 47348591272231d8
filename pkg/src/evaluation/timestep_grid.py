"""Cross-timestep LDS: how well ℓ_t' as an influence measurement predicts changes in ℓ_t."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from src.curvature.state import CurvatureState
from src.diffusion.measurements import PER_TIMESTEP_LOSS, MeasurementFn
from src.evaluation.metrics import lds
from src.evaluation.retraining import TrainSetup, measure_models, train_subset_models, weight_vectors
from src.influence.prediction import predict_lds_deltas
from src.influence.scores import influence_scores
from src.nn.network import EpsilonNet
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimestepGrid:
    grid: np.ndarray  # (len(proxy_timesteps), len(target_timesteps))
    stderr: np.ndarray
    proxy_timesteps: tuple[int, ...]
    target_timesteps: tuple[int, ...]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for a, tp in enumerate(self.proxy_timesteps):
            for b, tt in enumerate(self.target_timesteps):
                rows.append(
                    {"proxy_t": tp, "target_t": tt, "lds": self.grid[a, b], "stderr": self.stderr[a, b]}
                )
        return pd.DataFrame(rows)


def timestep_cross_lds(
    setup: TrainSetup,
    net: EpsilonNet,
    state: CurvatureState,
    damping: float,
    proxy_timesteps: Sequence[int],
    target_timesteps: Sequence[int],
    subsets: Sequence[np.ndarray],
    K: int,
    queries: Sequence,
    S: int,
    measurement_stream: RngStream,
    train_stream: RngStream,
    downweight_fraction: float = 1.0,
    workers: int = 1,
) -> TimestepGrid:
    """Entry (t', t): LDS of ℓ_t'-based predictions against retrained changes in ℓ_t.

    Subset models are trained once and measured at every target timestep.
    """
    N = len(setup.dataset)
    weights = weight_vectors(subsets, N, downweight_fraction)
    models = train_subset_models(setup, weights, K, workers)

    def fns(t: int) -> list[MeasurementFn]:
        base = MeasurementFn(PER_TIMESTEP_LOSS, S, measurement_stream.child("t", t), t)
        return [base.for_query(q) for q in range(len(queries))]

    oracles = {t: measure_models(models, setup.schedule, queries, fns(t)) for t in target_timesteps}
    grid = np.empty((len(proxy_timesteps), len(target_timesteps)))
    stderr = np.empty_like(grid)
    for a, tp in enumerate(proxy_timesteps):
        sm = influence_scores(
            net, setup.schedule, state, damping, queries, fns(tp), setup.dataset, S, train_stream,
            workers=workers,
        )
        predictions = predict_lds_deltas(sm, subsets, N, downweight_fraction)
        for b, tt in enumerate(target_timesteps):
            result = lds(predictions, oracles[tt])
            grid[a, b], stderr[a, b] = result.mean, result.stderr
        logger.info("proxy t=%d: LDS row %s", tp, np.round(grid[a], 3))
    return TimestepGrid(grid, stderr, tuple(int(t) for t in proxy_timesteps), tuple(int(t) for t in target_timesteps))
