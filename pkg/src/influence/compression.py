"""Per-layer symmetric absmax int8 compression of gradient vectors."""

from dataclasses import dataclass

import numpy as np

from src.utils.errors import ConfigurationError, NumericInputError

CODEC = "int8-absmax-per-layer"


@dataclass(frozen=True)
class CompressedGradients:
    payload: np.ndarray  # (n, length) int8
    scales: np.ndarray  # (n, n_layers)
    boundaries: np.ndarray  # layer offsets, n_layers + 1 entries
    length: int
    codec: str = CODEC

    def __len__(self) -> int:
        return self.payload.shape[0]

    def describe(self) -> dict:
        return {"codec": self.codec, "layers": len(self.boundaries) - 1, "length": self.length}


def _boundaries(length: int, layer_slices) -> np.ndarray:
    if layer_slices is None:
        return np.array([0, length])
    bounds = [0] + [s.stop for s in layer_slices]
    if bounds[-1] != length:
        raise ConfigurationError(f"layer slices cover {bounds[-1]} entries, vectors have {length}")
    return np.asarray(bounds)


def quantize(vecs: np.ndarray, layer_slices=None) -> CompressedGradients:
    vecs = np.asarray(vecs, dtype=np.float64)
    vecs = np.atleast_2d(vecs)
    if not np.all(np.isfinite(vecs)):
        raise NumericInputError("cannot quantize non-finite gradients")
    bounds = _boundaries(vecs.shape[1], layer_slices)

    payload = np.zeros(vecs.shape, dtype=np.int8)
    scales = np.zeros((vecs.shape[0], len(bounds) - 1))
    for l, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        block = vecs[:, lo:hi]
        s = np.max(np.abs(block), axis=1) / 127.0 if hi > lo else np.zeros(len(vecs))
        safe = np.where(s > 0, s, 1.0)
        payload[:, lo:hi] = np.clip(np.rint(block / safe[:, None]), -127, 127).astype(np.int8)
        scales[:, l] = s
    return CompressedGradients(payload, scales, bounds, vecs.shape[1])


def dequantize(compressed: CompressedGradients) -> np.ndarray:
    out = np.empty(compressed.payload.shape, dtype=np.float64)
    bounds = compressed.boundaries
    for l, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        out[:, lo:hi] = compressed.payload[:, lo:hi].astype(np.float64) * compressed.scales[:, l][:, None]
    return out


def roundtrip(vecs: np.ndarray, layer_slices=None) -> np.ndarray:
    vecs = np.asarray(vecs, dtype=np.float64)
    out = dequantize(quantize(vecs, layer_slices))
    return out[0] if vecs.ndim == 1 else out
