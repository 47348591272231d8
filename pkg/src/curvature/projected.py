import logging
import warnings

import numpy as np
from sklearn.exceptions import DataDimensionalityWarning
from sklearn.random_projection import GaussianRandomProjection

from src.curvature.kfac import check_inputs
from src.curvature.state import PROJECTED, CurvatureState, ProjectedPayload
from src.data.toy import Dataset, as_dataset
from src.diffusion.schedule import NoiseSchedule
from src.nn.gradients import per_example_train_gradient
from src.nn.network import EpsilonNet, fingerprint
from src.utils.errors import ConfigurationError
from src.utils.parallel import ordered_map
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

PROJECTIONS = ("gaussian", "identity")


def projection_matrix(kind: str, d_proj: int, proj_seed: int, d_param: int) -> np.ndarray:
    """(d_proj, d_param) sketch; gaussian entries are N(0, 1/d_proj)."""
    if d_proj < 1:
        raise ConfigurationError("d_proj must be >= 1")
    if kind == "identity":
        if d_proj != d_param:
            raise ConfigurationError("identity projection needs d_proj == d_param")
        return np.eye(d_param)
    if kind != "gaussian":
        raise ConfigurationError(f"Unknown projection kind: {kind!r}")
    projector = GaussianRandomProjection(n_components=d_proj, random_state=proj_seed)
    with warnings.catch_warnings():
        # d_proj may exceed d_param on tiny nets
        warnings.simplefilter("ignore", DataDimensionalityWarning)
        projector.fit(np.zeros((1, d_param)))
    return np.asarray(projector.components_, dtype=np.float64)


def projected_ef(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    d_proj: int,
    proj_seed: int,
    S: int,
    stream: RngStream,
    workers: int = 1,
    projection: str = "gaussian",
    progress: bool = False,
) -> CurvatureState:
    """Empirical Fisher of randomly projected per-example training gradients."""
    dataset = as_dataset(dataset)
    check_inputs("loss", S, dataset)
    P = projection_matrix(projection, d_proj, proj_seed, net.param_count)

    def projected_gradient(pos: int) -> np.ndarray:
        g = per_example_train_gradient(
            net, schedule, dataset.points[pos], S, stream.child("example", int(dataset.ids[pos]))
        )
        return P @ g

    rows = ordered_map(projected_gradient, range(len(dataset)), workers=workers, desc="project", progress=progress)
    gradients = np.stack(rows)
    order = np.argsort(dataset.ids, kind="stable")
    ordered = gradients[order]
    second_moment = ordered.T @ ordered / len(dataset)
    second_moment = 0.5 * (second_moment + second_moment.T)
    logger.info("Projected %d training gradients to %d dimensions", len(dataset), d_proj)

    return CurvatureState(
        backend=PROJECTED,
        ggn_kind="loss",
        projected=ProjectedPayload(projection, proj_seed, d_proj, P, gradients, second_moment),
        meta={
            "N": len(dataset),
            "S": S,
            "projection": projection,
            "proj_seed": proj_seed,
            "d_proj": d_proj,
            "stream": stream.describe(),
            "net": fingerprint(net),
        },
    )
