"""Linear layers with explicit weight sharing.

Every layer maps a batch of flat inputs (B, in_dim) to flat outputs (B, out_dim)
through the same three steps: extract M patches of length ``fan_in`` per example,
apply one affine map to every patch, flatten (position, channel) row-major.
Keeping patch extraction explicit is what lets curvature code read the Kronecker
factors straight off the forward/backward pass.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from src.utils.errors import ConfigurationError

ACTIVATIONS = ("silu", "identity")


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "silu":
        return z * expit(z)
    raise ConfigurationError(f"Unknown activation: {kind!r}")


def activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "silu":
        s = expit(z)
        return s * (1.0 + z * (1.0 - s))
    raise ConfigurationError(f"Unknown activation: {kind!r}")


def augment(patches: np.ndarray) -> np.ndarray:
    """Append the constant-1 coordinate that carries the bias."""
    ones = np.ones(patches.shape[:-1] + (1,), dtype=patches.dtype)
    return np.concatenate([patches, ones], axis=-1)


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "silu"

    kind = "dense"

    @property
    def fan_in(self) -> int:
        return self.in_dim

    @property
    def sharing_size(self) -> int:
        return 1

    @property
    def output_dim(self) -> int:
        return self.out_dim

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def patches(self, x: np.ndarray) -> np.ndarray:
        return x[:, None, :]

    def patches_backward(self, d_patches: np.ndarray) -> np.ndarray:
        return d_patches[:, 0, :]

    def flat_params(self) -> np.ndarray:
        return np.vstack([self.weight, self.bias[None, :]]).ravel()

    def with_flat_params(self, flat: np.ndarray) -> "Dense":
        block = np.asarray(flat, dtype=np.float64).reshape(self.fan_in + 1, self.out_dim)
        return replace(self, weight=block[:-1].copy(), bias=block[-1].copy())

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class Conv1d:
    length: int
    kernel_width: int
    in_channels: int
    out_channels: int
    weight: np.ndarray  # (kernel_width * in_channels, out_channels)
    bias: np.ndarray  # (out_channels,)
    activation: str = "silu"

    kind = "conv1d"

    @property
    def in_dim(self) -> int:
        return self.length * self.in_channels

    @property
    def fan_in(self) -> int:
        return self.kernel_width * self.in_channels

    @property
    def sharing_size(self) -> int:
        return self.length - self.kernel_width + 1

    @property
    def out_dim(self) -> int:
        return self.out_channels

    @property
    def output_dim(self) -> int:
        return self.sharing_size * self.out_channels

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def patches(self, x: np.ndarray) -> np.ndarray:
        batch = x.shape[0]
        seq = x.reshape(batch, self.length, self.in_channels)
        # (B, M, C, k) -> (B, M, k, C) so each patch flattens position-major
        windows = np.lib.stride_tricks.sliding_window_view(seq, self.kernel_width, axis=1)
        windows = np.swapaxes(windows, 2, 3)
        return windows.reshape(batch, self.sharing_size, self.fan_in)

    def patches_backward(self, d_patches: np.ndarray) -> np.ndarray:
        batch = d_patches.shape[0]
        m = self.sharing_size
        d_patches = d_patches.reshape(batch, m, self.kernel_width, self.in_channels)
        d_seq = np.zeros((batch, self.length, self.in_channels), dtype=d_patches.dtype)
        for j in range(self.kernel_width):
            d_seq[:, j : j + m, :] += d_patches[:, :, j, :]
        return d_seq.reshape(batch, self.in_dim)

    def flat_params(self) -> np.ndarray:
        return np.vstack([self.weight, self.bias[None, :]]).ravel()

    def with_flat_params(self, flat: np.ndarray) -> "Conv1d":
        block = np.asarray(flat, dtype=np.float64).reshape(self.fan_in + 1, self.out_dim)
        return replace(self, weight=block[:-1].copy(), bias=block[-1].copy())

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "length": self.length,
            "kernel_width": self.kernel_width,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "activation": self.activation,
        }


Layer = Dense | Conv1d
