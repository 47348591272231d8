"""Continual-deployment scoring: precondition training gradients once, then
score incoming queries with a single inner product each."""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.curvature.precondition import precondition
from src.curvature.state import PROJECTED, CurvatureState
from src.data.toy import Dataset, as_dataset
from src.diffusion.measurements import MeasurementFn
from src.diffusion.schedule import NoiseSchedule
from src.influence.compression import CODEC, CompressedGradients, dequantize, quantize
from src.influence.gradients import query_gradient, train_gradient
from src.influence.scores import ScoreMatrix, check_provenance, describe_measurement, per_query_measurements, sketch
from src.nn.network import EpsilonNet, fingerprint
from src.utils.container import ArtifactContainer
from src.utils.errors import ProvenanceError
from src.utils.parallel import ordered_map
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainCache:
    train_ids: np.ndarray
    preconditioned: np.ndarray | None = None  # (N, dim) when uncompressed
    compressed: CompressedGradients | None = None
    projection: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    def vectors(self) -> np.ndarray:
        if self.compressed is not None:
            return dequantize(self.compressed)
        return self.preconditioned

    def to_container(self, meta: dict | None = None) -> ArtifactContainer:
        container = ArtifactContainer(meta={**(meta or {}), "cache": self.meta})
        container.add("train_ids", self.train_ids)
        if self.compressed is not None:
            container.add("payload", self.compressed.payload)
            container.add("scales", self.compressed.scales)
            container.add("boundaries", self.compressed.boundaries)
        else:
            container.add("preconditioned", self.preconditioned)
        return container

    @classmethod
    def from_container(cls, container: ArtifactContainer, projection: np.ndarray | None = None) -> "TrainCache":
        compressed = None
        preconditioned = None
        if "payload" in container:
            payload = container["payload"]
            compressed = CompressedGradients(
                payload, container["scales"], container["boundaries"].astype(np.int64), payload.shape[1]
            )
        else:
            preconditioned = container["preconditioned"]
        return cls(container["train_ids"], preconditioned, compressed, projection, dict(container.meta.get("cache", {})))


def build_train_cache(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    state: CurvatureState,
    damping: float,
    dataset: Dataset | np.ndarray,
    S: int,
    stream: RngStream,
    compress: bool = True,
    workers: int = 1,
    train_measurement: MeasurementFn | None = None,
    progress: bool = False,
) -> TrainCache:
    check_provenance(state, net)
    dataset = as_dataset(dataset)
    projected = state.backend == PROJECTED

    def one(pos: int) -> np.ndarray:
        g = train_gradient(
            net,
            schedule,
            dataset.points[pos],
            S,
            stream.child("example", int(dataset.ids[pos])),
            train_measurement,
        )
        return precondition(state, damping, sketch(state, g))

    rows = np.stack(ordered_map(one, range(len(dataset)), workers=workers, desc="cache", progress=progress))
    meta = {
        "net": fingerprint(net),
        "damping": float(damping),
        "curvature": state.describe(),
        "train_measurement": train_measurement.describe() if train_measurement else "training_loss",
        "S": S,
        "stream": stream.describe(),
        "compression": CODEC if compress else "none",
    }
    projection = state.projected.matrix if projected else None
    logger.info("Cached %d preconditioned training gradients (compression %s)", len(rows), meta["compression"])
    if compress:
        slices = None if projected else net.layer_slices()
        return TrainCache(dataset.ids, None, quantize(rows, slices), projection, meta)
    return TrainCache(dataset.ids, rows, None, projection, meta)


def score_queries(
    cache: TrainCache,
    net: EpsilonNet,
    schedule: NoiseSchedule,
    queries: Sequence,
    measurement,
    query_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> ScoreMatrix:
    if cache.meta.get("net") != fingerprint(net):
        raise ProvenanceError("training cache was built for a different network")
    fns = per_query_measurements(measurement, len(queries))
    ys = cache.vectors()

    def row(q: int) -> np.ndarray:
        g = query_gradient(net, schedule, fns[q], queries[q])
        if cache.projection is not None:
            g = cache.projection @ g
        return np.array([np.dot(g, y) for y in ys])

    rows = ordered_map(row, range(len(queries)), workers=workers, desc="score queries")
    scores = np.stack(rows) if rows else np.zeros((0, len(cache.train_ids)))
    meta = {**cache.meta, "measurement": describe_measurement(measurement)}
    meta.pop("net", None)
    ids = np.arange(len(queries)) if query_ids is None else np.asarray(query_ids)
    return ScoreMatrix(scores, ids, cache.train_ids, meta)
