"""Influence scores ∇m_qᵀ (H + λI)⁻¹ ∇ℓ_j with query batching.

Positive scores predict that removing training example j increases the
measurement of query q.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from src.curvature.precondition import precondition
from src.curvature.state import PROJECTED, CurvatureState
from src.data.toy import Dataset, as_dataset
from src.diffusion.measurements import MeasurementFn
from src.diffusion.schedule import NoiseSchedule
from src.influence.compression import CODEC, roundtrip
from src.influence.gradients import query_gradient, train_gradient
from src.nn.network import EpsilonNet, fingerprint
from src.utils.container import ArtifactContainer
from src.utils.errors import NumericInputError, ProvenanceError
from src.utils.parallel import ordered_map
from src.utils.rng import RngStream
from src.utils.tables import write_table

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreMatrix:
    scores: np.ndarray  # (Q, N)
    query_ids: np.ndarray
    train_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if scores.shape != (len(self.query_ids), len(self.train_ids)):
            raise ValueError(
                f"score grid {scores.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.train_ids)} training examples"
            )
        if not np.all(np.isfinite(scores)):
            raise NumericInputError("score matrix contains non-finite entries")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "query_ids", np.asarray(self.query_ids, dtype=np.int64))
        object.__setattr__(self, "train_ids", np.asarray(self.train_ids, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def meta_hash(self) -> str:
        payload = json.dumps(self.meta, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def to_container(self, meta: dict | None = None) -> ArtifactContainer:
        container = ArtifactContainer(meta={**(meta or {}), "scores": self.meta})
        container.add("scores", self.scores)
        container.add("query_ids", self.query_ids)
        container.add("train_ids", self.train_ids)
        return container

    @classmethod
    def from_container(cls, container: ArtifactContainer) -> "ScoreMatrix":
        return cls(
            container["scores"],
            container["query_ids"],
            container["train_ids"],
            dict(container.meta.get("scores", {})),
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.scores, columns=[f"train_{j}" for j in self.train_ids])
        frame.insert(0, "query", self.query_ids)
        return frame

    def write_csv(self, path: str | Path, meta: dict | None = None) -> None:
        write_table(self.to_frame(), path, {**(meta or {}), "scores_hash": self.meta_hash()})


def check_provenance(state: CurvatureState, net: EpsilonNet) -> None:
    expected = state.meta.get("net")
    if expected is not None and expected != fingerprint(net):
        raise ProvenanceError("curvature state was built for a different network")


def per_query_measurements(measurement, n_queries: int) -> list[MeasurementFn]:
    if isinstance(measurement, MeasurementFn):
        return [measurement.for_query(q) for q in range(n_queries)]
    fns = list(measurement)
    if len(fns) != n_queries:
        raise ValueError(f"{len(fns)} measurements for {n_queries} queries")
    return fns


def sketch(state: CurvatureState, g: np.ndarray) -> np.ndarray:
    """Map a parameter-space gradient into the space ``state`` preconditions in."""
    if state.backend == PROJECTED:
        return state.projected.project(g)
    return g


def preconditioned_queries(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    state: CurvatureState,
    damping: float,
    queries: Sequence,
    measurement,
    compress: bool = False,
    workers: int = 1,
) -> list[np.ndarray]:
    """y_q = (H + λI)⁻¹ ∇m_q for every query, computed once and reused for all j."""
    fns = per_query_measurements(measurement, len(queries))

    def one(q: int) -> np.ndarray:
        g = sketch(state, query_gradient(net, schedule, fns[q], queries[q]))
        y = precondition(state, damping, g)
        if compress:
            slices = None if state.backend == PROJECTED else net.layer_slices()
            y = roundtrip(y, slices)
        return y

    return ordered_map(one, range(len(queries)), workers=workers, desc="query gradients")


def influence_scores(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    state: CurvatureState,
    damping: float,
    queries: Sequence,
    measurement,
    dataset: Dataset | np.ndarray,
    S: int,
    stream: RngStream,
    compress: bool = False,
    workers: int = 1,
    train_measurement: MeasurementFn | None = None,
    query_ids: Sequence[int] | None = None,
    progress: bool = False,
) -> ScoreMatrix:
    """Single-use influence computation over all (query, training example) pairs.

    ``measurement`` is either one MeasurementFn (query q then uses its
    ``for_query(q)`` stream) or one MeasurementFn per query. ``stream`` drives
    the per-example training gradients; ``train_measurement`` substitutes the
    training loss with another measurement evaluated at each training point.
    """
    check_provenance(state, net)
    dataset = as_dataset(dataset)
    ys = preconditioned_queries(net, schedule, state, damping, queries, measurement, compress, workers)
    logger.info(
        "Scoring %d queries against %d training examples (%s, damping %g)",
        len(ys), len(dataset), state.backend, damping,
    )

    def column(pos: int) -> np.ndarray:
        g = train_gradient(
            net,
            schedule,
            dataset.points[pos],
            S,
            stream.child("example", int(dataset.ids[pos])),
            train_measurement,
        )
        g = sketch(state, g)
        return np.array([np.dot(y, g) for y in ys])

    columns = ordered_map(column, range(len(dataset)), workers=workers, desc="influence", progress=progress)
    scores = np.stack(columns, axis=1) if columns else np.zeros((len(ys), 0))
    meta = {
        "damping": float(damping),
        "curvature": state.describe(),
        "measurement": describe_measurement(measurement),
        "train_measurement": train_measurement.describe() if train_measurement else "training_loss",
        "S": S,
        "stream": stream.describe(),
        "compression": CODEC if compress else "none",
    }
    ids = np.arange(len(ys)) if query_ids is None else np.asarray(query_ids)
    return ScoreMatrix(scores, ids, dataset.ids, meta)


def describe_measurement(measurement) -> dict | list:
    if isinstance(measurement, MeasurementFn):
        return measurement.describe()
    return [fn.describe() for fn in measurement]


def random_scores(Q: int, N: int, seed: int) -> ScoreMatrix:
    """Standard-normal scores; the null baseline for LDS and removal ablations."""
    rng = RngStream(seed).child("random_scores").generator()
    return ScoreMatrix(
        rng.standard_normal((Q, N)),
        np.arange(Q),
        np.arange(N),
        {"method": "random", "seed": int(seed)},
    )
