"""Dense GGN oracles for tiny networks."""

import logging

import numpy as np

from src.curvature.kfac import check_inputs
from src.curvature.state import DENSE, CurvatureState
from src.data.toy import Dataset, as_dataset
from src.diffusion.process import q_sample
from src.diffusion.schedule import NoiseSchedule
from src.nn.gradients import draw_samples, output_jacobian, per_example_train_gradient
from src.nn.network import EpsilonNet, fingerprint
from src.utils.errors import OracleScaleError
from src.utils.parallel import ordered_map, tree_sum
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

MAX_DENSE_PARAMS = 2000


def _guard(net: EpsilonNet, max_params: int) -> None:
    if net.param_count > max_params:
        raise OracleScaleError(
            f"dense oracle limited to {max_params} parameters, network has {net.param_count}"
        )


def _sample_jacobians(net, schedule, x0, S, stream) -> list[np.ndarray]:
    ts, eps = draw_samples(schedule, x0, stream, S)
    x_t = q_sample(schedule, np.broadcast_to(x0, eps.shape), ts, eps)
    return [output_jacobian(net, x_t[s], ts[s]) for s in range(S)]


def dense_ggn(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    ggn_kind: str,
    S: int,
    stream: RngStream,
    workers: int = 1,
    max_params: int = MAX_DENSE_PARAMS,
) -> CurvatureState:
    """Explicit d_param x d_param GGN with the same per-example streams as K-FAC."""
    dataset = as_dataset(dataset)
    check_inputs(ggn_kind, S, dataset)
    _guard(net, max_params)
    order = np.argsort(dataset.ids, kind="stable")

    def contribution(pos: int) -> np.ndarray:
        x0 = dataset.points[pos]
        example_stream = stream.child("example", int(dataset.ids[pos]))
        if ggn_kind == "model":
            return sum(J.T @ J for J in _sample_jacobians(net, schedule, x0, S, example_stream)) / S
        g = per_example_train_gradient(net, schedule, x0, S, example_stream)
        return np.outer(g, g)

    per_example = ordered_map(contribution, order, workers=workers, desc="dense-ggn")
    matrix = tree_sum(per_example) / len(dataset)
    if ggn_kind == "model":
        matrix = 2.0 * matrix
    matrix = 0.5 * (matrix + matrix.T)
    logger.info("Dense %s GGN over %d parameters", ggn_kind, net.param_count)
    return CurvatureState(
        backend=DENSE,
        ggn_kind=ggn_kind,
        dense=matrix,
        meta={"N": len(dataset), "S": S, "stream": stream.describe(), "net": fingerprint(net)},
    )


def mc_fisher_ggn(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    S: int,
    stream: RngStream,
    n_targets: int,
    max_params: int = MAX_DENSE_PARAMS,
) -> tuple[CurvatureState, np.ndarray]:
    """Sampled-target estimate of the model GGN and its entrywise standard error.

    Draw k averages ½ g gᵀ over every frozen (example, sample) pair with
    g = -2 Jᵀ η_k; the estimate is the mean over the ``n_targets`` draws.
    """
    dataset = as_dataset(dataset)
    check_inputs("model", S, dataset)
    _guard(net, max_params)
    P = net.param_count
    per_draw = np.zeros((n_targets, P, P))
    for pos in np.argsort(dataset.ids, kind="stable"):
        example_stream = stream.child("example", int(dataset.ids[pos]))
        jacobians = _sample_jacobians(net, schedule, dataset.points[pos], S, example_stream)
        for s, J in enumerate(jacobians):
            eta = example_stream.child("sample", s, "eta").generator().standard_normal(
                (n_targets, net.output_dim)
            )
            g = -2.0 * eta @ J
            per_draw += 0.5 * g[:, :, None] * g[:, None, :]
    per_draw /= len(dataset) * S

    estimate = per_draw.mean(axis=0)
    stderr = per_draw.std(axis=0, ddof=1) / np.sqrt(n_targets) if n_targets > 1 else np.full((P, P), np.inf)
    state = CurvatureState(
        backend=DENSE,
        ggn_kind="model",
        dense=0.5 * (estimate + estimate.T),
        meta={
            "N": len(dataset),
            "S": S,
            "estimator": "mc",
            "n_targets": n_targets,
            "stream": stream.describe(),
            "net": fingerprint(net),
        },
    )
    return state, stderr
