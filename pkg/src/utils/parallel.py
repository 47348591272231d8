import logging
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    desc: str | None = None,
    progress: bool = False,
) -> list[R]:
    """Apply ``fn`` to every item and return results in input order.

    Results never depend on ``workers``: each call is computed independently and
    gathered by position.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        iterator: Iterable[T] = tqdm(items, desc=desc, disable=not progress, leave=False)
        return [fn(item) for item in iterator]

    logger.debug("Dispatching %d jobs over %d workers (%s)", len(items), workers, desc)
    return Parallel(n_jobs=workers)(delayed(fn)(item) for item in items)


def tree_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise sum with a shape fixed by ``len(arrays)`` only."""
    if len(arrays) == 0:
        raise ValueError("tree_sum needs at least one array")
    level = [np.asarray(a, dtype=np.float64) for a in arrays]
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0].copy()
