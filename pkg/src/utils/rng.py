"""Hierarchical, path-addressed random streams.

Every stochastic draw in the package goes through an ``RngStream``. A stream is
identified by a root seed and a path of labels/indices; the same (seed, path)
always yields the same numpy ``Generator``, independently of call order or of
which worker process evaluates it.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_key(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"Stream indices must be non-negative, got {label}")
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=4).digest()
    # high bit keeps string labels disjoint from small integer indices
    return int.from_bytes(digest, "little") | (1 << 32)


@dataclass(frozen=True)
class RngStream:
    root_seed: int
    path: tuple[str | int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "root_seed", int(self.root_seed) & _MASK64)

    def child(self, *labels: str | int) -> "RngStream":
        return RngStream(self.root_seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self.root_seed,
            spawn_key=tuple(_label_key(label) for label in self.path),
        )
        return np.random.Generator(np.random.PCG64(seq))

    def describe(self) -> dict:
        return {"root_seed": self.root_seed, "path": [str(p) for p in self.path]}
