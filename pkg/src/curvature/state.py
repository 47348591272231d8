from dataclasses import dataclass, field

import numpy as np

from src.utils.container import ArtifactContainer
from src.utils.errors import ConfigurationError, ContainerError

KFAC = "kfac"
EKFAC = "ekfac"
DENSE = "dense"
PROJECTED = "projected"
BACKENDS = (KFAC, EKFAC, DENSE, PROJECTED)

GGN_KINDS = ("model", "loss")
SHARINGS = ("expand", "reduce")
ESTIMATORS = ("mc", "exact")

# E[g gᵀ] of the sampled-target gradients is twice the model-split GGN
GGN_SCALE = {"model": 0.5, "loss": 1.0}


@dataclass(frozen=True)
class KroneckerBlock:
    """A (fan_in + 1 square) and B (out square); operator is ``scale · A ⊗ B``."""

    A: np.ndarray
    B: np.ndarray
    eigvals_A: np.ndarray | None = None
    eigvecs_A: np.ndarray | None = None
    eigvals_B: np.ndarray | None = None
    eigvecs_B: np.ndarray | None = None
    corrected: np.ndarray | None = None  # (fan_in + 1, out) EK-FAC eigenvalues

    def dense(self, scale: float) -> np.ndarray:
        """Explicit block, only for small layers."""
        if self.corrected is not None:
            Q = np.kron(self.eigvecs_A, self.eigvecs_B)
            return Q @ np.diag(scale * self.corrected.ravel()) @ Q.T
        return scale * np.kron(self.A, self.B)


@dataclass(frozen=True)
class ProjectedPayload:
    kind: str  # "gaussian" or "identity"
    seed: int
    d_proj: int
    matrix: np.ndarray = field(repr=False)  # (d_proj, d_param)
    gradients: np.ndarray = field(repr=False)  # (N, d_proj)
    second_moment: np.ndarray = field(repr=False)  # (d_proj, d_proj)

    def project(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


@dataclass(frozen=True)
class CurvatureState:
    backend: str
    ggn_kind: str
    sharing: str | None = None
    scale: float = 1.0
    blocks: tuple[KroneckerBlock, ...] | None = None
    dense: np.ndarray | None = None
    projected: ProjectedPayload | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"Unknown curvature backend: {self.backend!r}")
        if self.ggn_kind not in GGN_KINDS:
            raise ConfigurationError(f"Unknown GGN kind: {self.ggn_kind!r}")

    def describe(self) -> dict:
        return {
            "backend": self.backend,
            "ggn_kind": self.ggn_kind,
            "sharing": self.sharing,
            "scale": self.scale,
            **self.meta,
        }

    def block_diagonal(self) -> list[np.ndarray]:
        if self.blocks is None:
            raise ConfigurationError(f"{self.backend} state has no Kronecker blocks")
        return [block.dense(self.scale) for block in self.blocks]


def state_to_container(state: CurvatureState, meta: dict | None = None) -> ArtifactContainer:
    container = ArtifactContainer(meta={**(meta or {}), "curvature": state.describe()})
    if state.blocks is not None:
        for l, block in enumerate(state.blocks):
            container.add(f"layer{l}.A", block.A)
            container.add(f"layer{l}.B", block.B)
            if block.eigvecs_A is not None:
                container.add(f"layer{l}.QA", block.eigvecs_A)
                container.add(f"layer{l}.QB", block.eigvecs_B)
                container.add(f"layer{l}.lambda_A", block.eigvals_A)
                container.add(f"layer{l}.lambda_B", block.eigvals_B)
            if block.corrected is not None:
                container.add(f"layer{l}.corrected", block.corrected)
    if state.dense is not None:
        container.add("dense", state.dense)
    if state.projected is not None:
        container.add("projected.gradients", state.projected.gradients)
        container.add("projected.second_moment", state.projected.second_moment)
    return container


def state_from_container(container: ArtifactContainer, projection_matrix=None) -> CurvatureState:
    info = dict(container.meta.get("curvature", {}))
    if not info:
        raise ContainerError("container holds no curvature state")
    backend = info.pop("backend")
    ggn_kind = info.pop("ggn_kind")
    sharing = info.pop("sharing")
    scale = float(info.pop("scale"))

    blocks = None
    if backend in (KFAC, EKFAC):
        blocks, l = [], 0
        while f"layer{l}.A" in container:
            kwargs = {}
            if f"layer{l}.QA" in container:
                kwargs = dict(
                    eigvecs_A=container[f"layer{l}.QA"],
                    eigvecs_B=container[f"layer{l}.QB"],
                    eigvals_A=container[f"layer{l}.lambda_A"],
                    eigvals_B=container[f"layer{l}.lambda_B"],
                )
            if f"layer{l}.corrected" in container:
                kwargs["corrected"] = container[f"layer{l}.corrected"]
            blocks.append(KroneckerBlock(container[f"layer{l}.A"], container[f"layer{l}.B"], **kwargs))
            l += 1
        blocks = tuple(blocks)

    projected = None
    if backend == PROJECTED:
        if projection_matrix is None:
            raise ContainerError("projected state needs its regenerated projection matrix")
        projected = ProjectedPayload(
            kind=info["projection"],
            seed=int(info["proj_seed"]),
            d_proj=int(info["d_proj"]),
            matrix=projection_matrix,
            gradients=container["projected.gradients"],
            second_moment=container["projected.second_moment"],
        )
    dense = container["dense"] if "dense" in container else None
    return CurvatureState(backend, ggn_kind, sharing, scale, blocks, dense, projected, info)
