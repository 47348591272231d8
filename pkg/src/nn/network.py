import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from src.nn.layers import ACTIVATIONS, Conv1d, Dense, Layer, activate, activate_grad, augment
from src.utils.errors import ConfigurationError, NumericInputError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if dim == 0:
        return np.zeros((t.shape[0], 0))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class LayerTrace:
    """Per-layer patch inputs ``a`` (B, M, fan_in + 1) and output gradients ``b`` (B, M, out)."""

    a: list[np.ndarray]
    b: list[np.ndarray] | None = None
    pre: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def sharing_sizes(self) -> list[int]:
        return [a.shape[1] for a in self.a]

    def layer_gradient(self, layer: int) -> np.ndarray:
        """Σ over batch rows and positions of a_m ⊗ b_m, flattened like the parameters."""
        if self.b is None:
            raise ValueError("Trace has no output gradients; run a backward pass first")
        return np.einsum("bmi,bmo->io", self.a[layer], self.b[layer]).ravel()

    def per_row_layer_gradient(self, layer: int) -> np.ndarray:
        return np.einsum("bmi,bmo->bio", self.a[layer], self.b[layer]).reshape(self.a[layer].shape[0], -1)

    def flat_gradient(self) -> np.ndarray:
        return np.concatenate([self.layer_gradient(l) for l in range(len(self.a))])


@dataclass(frozen=True)
class EpsilonNet:
    layers: tuple[Layer, ...]
    data_dim: int
    time_embed_dim: int
    output_dim: int

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_embed_dim

    def layer_slices(self) -> list[slice]:
        slices, offset = [], 0
        for layer in self.layers:
            slices.append(slice(offset, offset + layer.param_count))
            offset += layer.param_count
        return slices

    def flat_params(self) -> np.ndarray:
        return np.concatenate([layer.flat_params() for layer in self.layers])

    def with_flat_params(self, flat: np.ndarray) -> "EpsilonNet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ConfigurationError(
                f"Expected {self.param_count} parameters, got shape {flat.shape}"
            )
        layers = tuple(
            layer.with_flat_params(flat[s]) for layer, s in zip(self.layers, self.layer_slices())
        )
        return EpsilonNet(layers, self.data_dim, self.time_embed_dim, self.output_dim)

    def describe(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "time_embed_dim": self.time_embed_dim,
            "output_dim": self.output_dim,
            "layers": [layer.describe() for layer in self.layers],
        }

    def forward_batch(self, x_t: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, LayerTrace]:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        if x_t.shape[1] != self.data_dim:
            raise ConfigurationError(
                f"Input has dimension {x_t.shape[1]}, network expects {self.data_dim}"
            )
        if not np.all(np.isfinite(x_t)):
            raise NumericInputError("Network input contains non-finite values")

        h = np.concatenate([x_t, time_embedding(t, self.time_embed_dim)], axis=1)
        trace = LayerTrace(a=[], pre=[])
        for layer in self.layers:
            a = augment(layer.patches(h))
            weight = np.vstack([layer.weight, layer.bias[None, :]])
            z = a @ weight
            trace.a.append(a)
            trace.pre.append(z)
            h = activate(z, layer.activation).reshape(h.shape[0], -1)
        return h, trace

    def backward(self, trace: LayerTrace, d_out: np.ndarray) -> LayerTrace:
        """Fill ``trace.b`` given the gradient of a scalar objective w.r.t. the output."""
        grad = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
        bs: list[np.ndarray] = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            z = trace.pre[idx]
            b = grad.reshape(z.shape) * activate_grad(z, layer.activation)
            bs[idx] = b
            if idx > 0:
                d_patches = b @ layer.weight.T
                grad = layer.patches_backward(d_patches)
        return LayerTrace(a=trace.a, b=bs, pre=trace.pre)

    def __call__(self, x_t: np.ndarray, t) -> np.ndarray:
        out, _ = self.forward_batch(x_t, t)
        return out


def forward(net: EpsilonNet, x_t: np.ndarray, t: int) -> tuple[np.ndarray, LayerTrace]:
    out, trace = net.forward_batch(np.asarray(x_t, dtype=np.float64)[None, :], np.array([t]))
    return out[0], trace


def _arch_dict(arch_config: Any) -> dict:
    if hasattr(arch_config, "model_dump"):
        return arch_config.model_dump()
    if isinstance(arch_config, Mapping):
        return dict(arch_config)
    raise ConfigurationError(f"Unsupported architecture description: {type(arch_config)}")


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_network(arch_config: Any, seed: int) -> EpsilonNet:
    arch = _arch_dict(arch_config)
    data_dim = int(arch["data_dim"])
    time_embed_dim = int(arch.get("time_embed_dim", 8))
    output_dim = int(arch.get("output_dim") or data_dim)
    if data_dim < 1 or time_embed_dim < 0 or time_embed_dim % 2:
        raise ConfigurationError(
            "architecture needs data_dim >= 1 and an even, non-negative time_embed_dim"
        )

    stream = RngStream(seed).child("init")
    in_dim = data_dim + time_embed_dim
    layers: list[Layer] = []
    for idx, spec in enumerate(arch["layers"]):
        spec = _arch_dict(spec)
        kind = spec.get("kind", "dense")
        activation = spec.get("activation", "silu")
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"layers[{idx}]: unknown activation {activation!r}")
        rng = stream.child("layer", idx).generator()

        if kind == "dense":
            out_dim = int(spec["out_dim"])
            if spec.get("in_dim") is not None and int(spec["in_dim"]) != in_dim:
                raise ConfigurationError(
                    f"layers[{idx}]: declared in_dim {spec['in_dim']} but receives {in_dim}"
                )
            if out_dim < 1:
                raise ConfigurationError(f"layers[{idx}]: out_dim must be positive")
            layer: Layer = Dense(
                in_dim=in_dim,
                out_dim=out_dim,
                weight=_uniform(rng, in_dim, (in_dim, out_dim)),
                bias=_uniform(rng, in_dim, (out_dim,)),
                activation=activation,
            )
        elif kind == "conv1d":
            kernel_width = int(spec["kernel_width"])
            in_channels = int(spec["in_channels"])
            out_channels = int(spec["out_channels"])
            if min(kernel_width, in_channels, out_channels) < 1 or in_dim % in_channels:
                raise ConfigurationError(
                    f"layers[{idx}]: input of size {in_dim} cannot be read as "
                    f"{in_channels} channels"
                )
            length = in_dim // in_channels
            if kernel_width > length:
                raise ConfigurationError(
                    f"layers[{idx}]: kernel_width {kernel_width} exceeds input length {length}"
                )
            fan_in = kernel_width * in_channels
            layer = Conv1d(
                length=length,
                kernel_width=kernel_width,
                in_channels=in_channels,
                out_channels=out_channels,
                weight=_uniform(rng, fan_in, (fan_in, out_channels)),
                bias=_uniform(rng, fan_in, (out_channels,)),
                activation=activation,
            )
        else:
            raise ConfigurationError(f"layers[{idx}]: unknown layer kind {kind!r}")
        layers.append(layer)
        in_dim = layer.output_dim

    if not layers:
        raise ConfigurationError("architecture has no layers")
    if in_dim != output_dim:
        raise ConfigurationError(
            f"layers[{len(layers) - 1}]: network output has size {in_dim}, expected {output_dim}"
        )

    net = EpsilonNet(tuple(layers), data_dim, time_embed_dim, output_dim)
    logger.info("Built network with %d layers and %d parameters", len(layers), net.param_count)
    return net


def fingerprint(net: EpsilonNet) -> str:
    """Stable hash of architecture and parameter bits, used for provenance checks."""
    h = hashlib.blake2b(digest_size=16)
    h.update(json.dumps(net.describe(), sort_keys=True).encode("utf-8"))
    h.update(np.ascontiguousarray(net.flat_params(), dtype="<f8").tobytes())
    return h.hexdigest()
