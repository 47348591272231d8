"""K-FAC accumulation for the diffusion GGN.

Each (example, sample) pair contributes the a-vectors of every layer and one
set of b-vectors per backward target:

* ``loss``: the training target ε, giving the per-sample training gradients.
* ``model`` with ``estimator="mc"``: the sampled target ε_θ(x_t) + η.
* ``model`` with ``estimator="exact"``: one backward pass per output unit,
  which is the η-expectation of the above in closed form.
"""

import logging

import numpy as np
from scipy import linalg

from src.curvature.state import (
    ESTIMATORS,
    GGN_KINDS,
    GGN_SCALE,
    KFAC,
    SHARINGS,
    CurvatureState,
    KroneckerBlock,
)
from src.data.toy import Dataset, as_dataset
from src.diffusion.process import q_sample
from src.diffusion.schedule import NoiseSchedule
from src.nn.gradients import draw_sample
from src.nn.layers import Conv1d, Dense
from src.nn.network import EpsilonNet, LayerTrace, fingerprint
from src.utils.errors import ConfigurationError, CurvatureNumericError, UnsupportedLayerError
from src.utils.parallel import ordered_map, tree_sum
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


def check_supported(net: EpsilonNet) -> None:
    for idx, layer in enumerate(net.layers):
        if not isinstance(layer, (Dense, Conv1d)):
            raise UnsupportedLayerError(
                f"layers[{idx}]: no Kronecker factorisation for {type(layer).__name__}"
            )


def check_inputs(ggn_kind: str, S: int, dataset: Dataset, sharing: str = "expand", estimator: str = "mc"):
    violations = []
    if ggn_kind not in GGN_KINDS:
        violations.append(("ggn_kind", f"must be one of {GGN_KINDS}"))
    if sharing not in SHARINGS:
        violations.append(("sharing", f"must be one of {SHARINGS}"))
    if estimator not in ESTIMATORS:
        violations.append(("estimator", f"must be one of {ESTIMATORS}"))
    if S < 1:
        violations.append(("S", "must be >= 1"))
    if len(dataset) == 0:
        violations.append(("dataset", "must not be empty"))
    if violations:
        raise ConfigurationError("Invalid curvature request", violations)


def example_traces(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    S: int,
    stream: RngStream,
    ggn_kind: str,
    estimator: str = "mc",
    force_training_targets: bool = False,
) -> list[LayerTrace]:
    """Forward all S frozen samples of one example, then backward once per target."""
    x0 = np.asarray(x0, dtype=np.float64)
    ts = np.empty(S, dtype=np.int64)
    eps = np.empty((S, x0.shape[-1]))
    eta = np.empty((S, net.output_dim))
    for s in range(S):
        ts[s], eps[s], rng = draw_sample(schedule, x0, stream.child("sample", s))
        eta[s] = rng.standard_normal(net.output_dim)

    x_t = q_sample(schedule, np.broadcast_to(x0, eps.shape), ts, eps)
    out, trace = net.forward_batch(x_t, ts)

    if ggn_kind == "loss" or force_training_targets:
        d_outs = [2.0 * (out - eps)]
    elif estimator == "mc":
        # ε_mod = out + η, so the residual is -η
        d_outs = [-2.0 * eta]
    else:
        d_outs = []
        for r in range(net.output_dim):
            unit = np.zeros((S, net.output_dim))
            unit[:, r] = -2.0
            d_outs.append(unit)
    return [net.backward(trace, d) for d in d_outs]


def _example_factors(traces: list[LayerTrace], ggn_kind: str, sharing: str) -> list[np.ndarray]:
    """Unnormalised [A_0, B_0, A_1, B_1, ...] sums for one example."""
    factors = []
    for l, a in enumerate(traces[0].a):
        if sharing == "expand":
            A = np.einsum("smi,smj->ij", a, a)
            B = sum(np.einsum("smo,smp->op", tr.b[l], tr.b[l]) for tr in traces)
        elif ggn_kind == "loss":
            a_hat = a.sum(axis=1).mean(axis=0)
            b_hat = traces[0].b[l].sum(axis=1).mean(axis=0)
            A = np.outer(a_hat, a_hat)
            B = np.outer(b_hat, b_hat)
        else:
            a_hat = a.sum(axis=1)
            A = a_hat.T @ a_hat
            B = 0.0
            for tr in traces:
                b_hat = tr.b[l].sum(axis=1)
                B = B + b_hat.T @ b_hat
        factors.extend([A, B])
    return factors


def eigh_clamped(matrix: np.ndarray, layer: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        values, vectors = linalg.eigh(matrix)
    except (linalg.LinAlgError, ValueError) as exc:
        raise CurvatureNumericError(f"eigendecomposition of {name} failed for layer {layer}: {exc}") from exc
    if not np.all(np.isfinite(values)):
        raise CurvatureNumericError(f"non-finite eigenvalues in {name} of layer {layer}")
    return np.maximum(values, 0.0), vectors


def _symmetrise(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def accumulate_kfac(
    net: EpsilonNet,
    schedule: NoiseSchedule,
    dataset: Dataset | np.ndarray,
    ggn_kind: str,
    sharing: str,
    S: int,
    stream: RngStream,
    estimator: str = "mc",
    workers: int = 1,
    force_training_targets: bool = False,
    progress: bool = False,
) -> CurvatureState:
    dataset = as_dataset(dataset)
    check_inputs(ggn_kind, S, dataset, sharing, estimator)
    check_supported(net)
    logger.info(
        "Accumulating K-FAC-%s (%s GGN, %s targets) over %d examples x %d samples",
        sharing, ggn_kind, estimator, len(dataset), S,
    )

    order = np.argsort(dataset.ids, kind="stable")

    def contribution(pos: int) -> list[np.ndarray]:
        traces = example_traces(
            net,
            schedule,
            dataset.points[pos],
            S,
            stream.child("example", int(dataset.ids[pos])),
            ggn_kind,
            estimator,
            force_training_targets,
        )
        return _example_factors(traces, ggn_kind, sharing)

    per_example = ordered_map(contribution, order, workers=workers, desc="kfac", progress=progress)
    n_factors = 2 * len(net.layers)
    totals = [tree_sum([ex[k] for ex in per_example]) for k in range(n_factors)]

    count = len(dataset) if (ggn_kind == "loss" and sharing == "reduce") else len(dataset) * S
    blocks = []
    for l, layer in enumerate(net.layers):
        M = layer.sharing_size
        a_norm = count * (M if sharing == "expand" else M**2)
        A = _symmetrise(totals[2 * l] / a_norm)
        B = _symmetrise(totals[2 * l + 1] / count)
        eigvals_A, eigvecs_A = eigh_clamped(A, l, "A")
        eigvals_B, eigvecs_B = eigh_clamped(B, l, "B")
        blocks.append(KroneckerBlock(A, B, eigvals_A, eigvecs_A, eigvals_B, eigvecs_B))

    return CurvatureState(
        backend=KFAC,
        ggn_kind=ggn_kind,
        sharing=sharing,
        scale=GGN_SCALE[ggn_kind],
        blocks=tuple(blocks),
        meta={
            "N": len(dataset),
            "S": S,
            "estimator": estimator,
            "stream": stream.describe(),
            "net": fingerprint(net),
        },
    )
