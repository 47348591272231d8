from dataclasses import replace

import numpy as np

from src.data.toy import Dataset
from src.diffusion.measurements import MeasurementFn, evaluate_terms, measurement_terms
from src.diffusion.schedule import NoiseSchedule
from src.nn.gradients import per_example_train_gradient
from src.nn.network import EpsilonNet
from src.utils.parallel import ordered_map
from src.utils.rng import RngStream


def query_gradient(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    measurement: MeasurementFn,
    query,
    S: int | None = None,
    stream: RngStream | None = None,
) -> np.ndarray:
    """∇_θ m(θ, query); ``S`` and ``stream`` override the measurement's own."""
    fn = measurement
    if S is not None:
        fn = replace(fn, S=S)
    if stream is not None:
        fn = replace(fn, stream=stream)
    _, grad = evaluate_terms(net, measurement_terms(schedule, fn, query), with_grad=True)
    return grad


def train_gradient(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    S: int,
    stream: RngStream,
    train_measurement: MeasurementFn | None = None,
) -> np.ndarray:
    """Training-loss gradient, or the gradient of a substitute measurement at x0."""
    if train_measurement is None:
        return per_example_train_gradient(net, schedule, x0, S, stream)
    return query_gradient(net, schedule, train_measurement, x0, S=S, stream=stream)


def train_gradients(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset,
    S: int,
    stream: RngStream,
    train_measurement: MeasurementFn | None = None,
    workers: int = 1,
    progress: bool = False,
) -> np.ndarray:
    """(N, param_count) gradients in dataset order, example j on ``child("example", id_j)``."""

    def one(pos: int) -> np.ndarray:
        return train_gradient(
            net,
            schedule,
            dataset.points[pos],
            S,
            stream.child("example", int(dataset.ids[pos])),
            train_measurement,
        )

    rows = ordered_map(one, range(len(dataset)), workers=workers, desc="train gradients", progress=progress)
    return np.stack(rows)
