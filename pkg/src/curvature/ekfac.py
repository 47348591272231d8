import logging
from dataclasses import replace

import numpy as np

from src.curvature.kfac import check_inputs, example_traces
from src.curvature.state import EKFAC, KFAC, CurvatureState
from src.data.toy import Dataset, as_dataset
from src.diffusion.schedule import NoiseSchedule
from src.nn.network import EpsilonNet, fingerprint
from src.utils.errors import ConfigurationError, ProvenanceError
from src.utils.parallel import ordered_map, tree_sum
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


def ekfac_correct(
    kfac: CurvatureState,
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    S2: int,
    stream: RngStream,
    workers: int = 1,
    progress: bool = False,
) -> CurvatureState:
    """Refit the Kronecker eigenvalues as second moments of rotated layer gradients."""
    if kfac.backend != KFAC:
        raise ConfigurationError(f"ekfac_correct needs a K-FAC state, got {kfac.backend}")
    if kfac.meta.get("net") != fingerprint(net):
        raise ProvenanceError("K-FAC state was accumulated for a different network")
    dataset = as_dataset(dataset)
    check_inputs(kfac.ggn_kind, S2, dataset)
    estimator = kfac.meta.get("estimator", "mc")
    bases = [(block.eigvecs_A, block.eigvecs_B) for block in kfac.blocks]
    logger.info("Correcting eigenvalues with %d examples x %d samples", len(dataset), S2)

    def contribution(pos: int) -> list[np.ndarray]:
        traces = example_traces(
            net,
            schedule,
            dataset.points[pos],
            S2,
            stream.child("example", int(dataset.ids[pos])),
            kfac.ggn_kind,
            estimator,
        )
        grids = []
        for l, (QA, QB) in enumerate(bases):
            grid = 0.0
            for tr in traces:
                G = np.einsum("smi,smo->sio", tr.a[l], tr.b[l])
                if kfac.ggn_kind == "loss":
                    G = G.mean(axis=0, keepdims=True)
                rotated = np.einsum("ij,sio,op->sjp", QA, G, QB)
                grid = grid + np.sum(rotated**2, axis=0)
            grids.append(grid)
        return grids

    order = np.argsort(dataset.ids, kind="stable")
    per_example = ordered_map(contribution, order, workers=workers, desc="ekfac", progress=progress)
    count = len(dataset) if kfac.ggn_kind == "loss" else len(dataset) * S2

    blocks = []
    for l, block in enumerate(kfac.blocks):
        corrected = tree_sum([ex[l] for ex in per_example]) / count
        blocks.append(replace(block, corrected=np.maximum(corrected, 0.0)))

    return replace(
        kfac,
        backend=EKFAC,
        blocks=tuple(blocks),
        meta={**kfac.meta, "S2": S2, "correction_stream": stream.describe()},
    )
