"""Container round-trips for the objects commands hand to each other."""

from pathlib import Path

import numpy as np

from src.curvature.projected import projection_matrix
from src.curvature.state import PROJECTED, CurvatureState, state_from_container, state_to_container
from src.data.toy import Dataset
from src.diffusion.sampling import Trajectory
from src.nn.layers import Conv1d, Dense
from src.nn.network import EpsilonNet, fingerprint
from src.utils.container import ArtifactContainer, file_checksum
from src.utils.errors import ContainerError, ProvenanceError


def provenance(config_hash: str, inputs: dict[str, Path] | None = None, **extra) -> dict:
    """Meta block for a new artifact: config hash plus checksums of its inputs."""
    return {
        "config_hash": config_hash,
        "inputs": {name: file_checksum(path) for name, path in (inputs or {}).items()},
        **extra,
    }


def open_artifact(
    path: Path, config_hash: str, inputs: dict[str, Path] | None = None, key: str = "config_hash"
) -> ArtifactContainer:
    """Load a chained artifact, refusing it if it came from another config or other inputs.

    ``key`` names the recorded hash to compare: the full ``config_hash`` or the
    ``shared_hash`` that ignores scoring-only settings.
    """
    if not path.exists():
        raise ContainerError(f"{path} not found; run the producing command first")
    container = ArtifactContainer.load(path)
    if container.meta.get(key) != config_hash:
        raise ProvenanceError(f"{path.name} was produced with a different configuration")
    recorded = container.meta.get("inputs", {})
    for name, upstream in (inputs or {}).items():
        if name in recorded and recorded[name] != file_checksum(upstream):
            raise ProvenanceError(f"{path.name} was derived from a different {name}")
    return container


def network_to_container(net: EpsilonNet, meta: dict) -> ArtifactContainer:
    container = ArtifactContainer(
        meta={
            **meta,
            "network": net.describe(),
            "fingerprint": fingerprint(net),
        }
    )
    for l, layer in enumerate(net.layers):
        container.add(f"layer{l}.weight", layer.weight)
        container.add(f"layer{l}.bias", layer.bias)
    return container


def network_from_container(container: ArtifactContainer) -> EpsilonNet:
    info = container.meta["network"]
    layers = []
    for l, spec in enumerate(info["layers"]):
        weight, bias = container[f"layer{l}.weight"], container[f"layer{l}.bias"]
        if spec["kind"] == "dense":
            layers.append(Dense(spec["in_dim"], spec["out_dim"], weight, bias, spec["activation"]))
        else:
            layers.append(
                Conv1d(
                    spec["length"],
                    spec["kernel_width"],
                    spec["in_channels"],
                    spec["out_channels"],
                    weight,
                    bias,
                    spec["activation"],
                )
            )
    net = EpsilonNet(tuple(layers), info["data_dim"], info["time_embed_dim"], info["output_dim"])
    if fingerprint(net) != container.meta["fingerprint"]:
        raise ProvenanceError("network parameters do not match their recorded fingerprint")
    return net


def dataset_to_container(dataset: Dataset, meta: dict) -> ArtifactContainer:
    container = ArtifactContainer(meta=meta)
    container.add("points", dataset.points)
    container.add("ids", dataset.ids)
    return container


def dataset_from_container(container: ArtifactContainer) -> Dataset:
    return Dataset(points=container["points"], ids=container["ids"])


def queries_to_container(trajectories: list[Trajectory], meta: dict) -> ArtifactContainer:
    container = ArtifactContainer(meta=meta)
    container.add("trajectories", np.stack([tr.states for tr in trajectories]))
    container.add("samples", np.stack([tr.sample for tr in trajectories]))
    container.add("seeds", np.array([tr.seed for tr in trajectories], dtype=np.uint64))
    return container


def queries_from_container(container: ArtifactContainer) -> list[Trajectory]:
    states = container["trajectories"]
    seeds = container["seeds"]
    return [Trajectory(states[q], int(seeds[q])) for q in range(states.shape[0])]


def curvature_to_container(state: CurvatureState, meta: dict) -> ArtifactContainer:
    return state_to_container(state, meta)


def curvature_from_container(container: ArtifactContainer, net: EpsilonNet) -> CurvatureState:
    info = container.meta.get("curvature", {})
    matrix = None
    if info.get("backend") == PROJECTED:
        matrix = projection_matrix(info["projection"], int(info["d_proj"]), int(info["proj_seed"]), net.param_count)
    return state_from_container(container, matrix)
