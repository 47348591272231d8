import numpy as np
from scipy import linalg

from src.curvature.state import DENSE, EKFAC, KFAC, PROJECTED, CurvatureState, KroneckerBlock
from src.utils.errors import ConfigurationError


def _check_damping(damping: float) -> float:
    damping = float(damping)
    if not np.isfinite(damping) or damping <= 0:
        raise ConfigurationError(
            "damping must be positive", [("attribution.damping", f"got {damping}")]
        )
    return damping


def _block_eigenvalues(block: KroneckerBlock, scale: float) -> np.ndarray:
    if block.corrected is not None:
        return scale * block.corrected
    return scale * np.outer(block.eigvals_A, block.eigvals_B)


def _solve_block(block: KroneckerBlock, scale: float, damping: float, V: np.ndarray) -> np.ndarray:
    QA, QB = block.eigvecs_A, block.eigvecs_B
    rotated = QA.T @ V @ QB
    rotated = rotated / (_block_eigenvalues(block, scale) + damping)
    return QA @ rotated @ QB.T


def block_sizes(state: CurvatureState) -> list[tuple[int, int]]:
    return [(block.A.shape[0], block.B.shape[0]) for block in state.blocks]


def precondition(state: CurvatureState, damping: float, v: np.ndarray) -> np.ndarray:
    """(H + λI)⁻¹ v for the approximation held by ``state``.

    ``v`` may also be a (param_count, k) matrix of column vectors. Projected
    states only accept vectors already mapped to the d_proj sketch space.
    """
    damping = _check_damping(damping)
    v = np.asarray(v, dtype=np.float64)

    if state.backend in (KFAC, EKFAC):
        matrix = v.reshape(v.shape[0], -1)
        out = np.empty_like(matrix)
        offset = 0
        for block, (rows, cols) in zip(state.blocks, block_sizes(state)):
            size = rows * cols
            for k in range(matrix.shape[1]):
                V = matrix[offset:offset + size, k].reshape(rows, cols)
                out[offset:offset + size, k] = _solve_block(block, state.scale, damping, V).ravel()
            offset += size
        if offset != matrix.shape[0]:
            raise ConfigurationError(f"vector has {matrix.shape[0]} entries, state covers {offset}")
        return out.reshape(v.shape)

    if state.backend == DENSE:
        H = state.dense
        if v.shape[0] != H.shape[0]:
            raise ConfigurationError(f"vector has {v.shape[0]} entries, state covers {H.shape[0]}")
        return linalg.solve(H + damping * np.eye(H.shape[0]), v, assume_a="sym")

    if state.backend == PROJECTED:
        payload = state.projected
        if v.shape[0] != payload.d_proj:
            raise ConfigurationError(f"vector has {v.shape[0]} entries, expected {payload.d_proj}")
        H = payload.second_moment
        return linalg.solve(H + damping * np.eye(payload.d_proj), v, assume_a="sym")

    raise ConfigurationError(f"Unknown curvature backend: {state.backend!r}")


def damped_matrix(state: CurvatureState, damping: float) -> np.ndarray:
    """Explicit damped operator (small nets only)."""
    damping = _check_damping(damping)
    if state.backend == DENSE:
        H = state.dense
    elif state.backend == PROJECTED:
        H = state.projected.second_moment
    else:
        H = linalg.block_diag(*state.block_diagonal())
    return H + damping * np.eye(H.shape[0])
