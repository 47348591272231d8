from typing import Iterable, Sequence

import numpy as np

from src.influence.scores import ScoreMatrix
from src.utils.errors import UnknownIndexError


def _columns(sm: ScoreMatrix, removed: Iterable[int]) -> np.ndarray:
    position = {int(j): pos for pos, j in enumerate(sm.train_ids)}
    columns = []
    for j in removed:
        if int(j) not in position:
            raise UnknownIndexError(f"training index {j} is not scored in this matrix")
        columns.append(position[int(j)])
    return np.asarray(columns, dtype=np.int64)


def predict_subset_delta(
    sm: ScoreMatrix, removed: Iterable[int], N: int, downweight_fraction: float = 1.0
) -> np.ndarray:
    """Per-query predicted measurement change when ``removed`` is down-weighted.

    Duplicate indices are counted once.
    """
    columns = np.unique(_columns(sm, removed))
    if columns.size == 0:
        return np.zeros(sm.shape[0])
    return (downweight_fraction / N) * sm.scores[:, columns].sum(axis=1)


def predict_lds_deltas(
    sm: ScoreMatrix, subsets: Sequence[np.ndarray], N: int, downweight_fraction: float = 1.0
) -> np.ndarray:
    """(M, Q) predicted changes for training on each subset, i.e. removing its complement."""
    all_ids = set(int(j) for j in sm.train_ids)
    rows = []
    for subset in subsets:
        kept = set(int(j) for j in subset)
        removed = sorted(all_ids - kept)
        rows.append(predict_subset_delta(sm, removed, N, downweight_fraction))
    return np.stack(rows)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; equal scores prefer the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]
