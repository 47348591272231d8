import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from src.utils.errors import UndefinedCorrelationError

logger = logging.getLogger(__name__)


def spearman(xs, ys) -> float:
    """Tie-aware Spearman correlation: Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"spearman needs two vectors of equal length, got {xs.shape} and {ys.shape}")
    if xs.size < 2:
        raise UndefinedCorrelationError("spearman needs at least two points")
    rx = rankdata(xs, method="average")
    ry = rankdata(ys, method="average")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if denom == 0:
        raise UndefinedCorrelationError("spearman is undefined for a constant vector")
    return float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class LdsResult:
    per_query: np.ndarray
    mean: float
    stderr: float

    def summary(self) -> dict:
        return {"lds_mean": self.mean, "lds_stderr": self.stderr, "queries": int(self.per_query.size)}


def lds(predictions: np.ndarray, oracle: np.ndarray) -> LdsResult:
    """Per-query Spearman between predicted deltas (M, Q) and K-averaged oracle (M, K, Q).

    Subsets whose oracle cells all diverged are dropped for that query.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if oracle.ndim != 3 or predictions.shape != (oracle.shape[0], oracle.shape[2]):
        raise ValueError(f"predictions {predictions.shape} do not match oracle {oracle.shape}")

    counts = np.sum(np.isfinite(oracle), axis=1)
    totals = np.sum(np.where(np.isfinite(oracle), oracle, 0.0), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        target = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)

    per_query = np.empty(predictions.shape[1])
    for q in range(predictions.shape[1]):
        keep = np.isfinite(target[:, q]) & np.isfinite(predictions[:, q])
        if not keep.all():
            logger.warning("query %d: dropping %d subsets with missing values", q, int((~keep).sum()))
        per_query[q] = spearman(predictions[keep, q], target[keep, q])

    Q = per_query.size
    mean = float(np.mean(per_query))
    stderr = float(np.std(per_query, ddof=1) / np.sqrt(Q)) if Q > 1 else float("nan")
    return LdsResult(per_query, mean, stderr)
