import numpy as np

from src.diffusion.process import q_sample
from src.diffusion.schedule import NoiseSchedule
from src.nn.network import EpsilonNet, LayerTrace
from src.utils.rng import RngStream


def sq_loss_batch(
    net: EpsilonNet,
    x_t: np.ndarray,
    t: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, LayerTrace]:
    """Per-row ‖target - ε_θ(x_t)‖² and the gradient of Σ_i w_i · row_i."""
    out, trace = net.forward_batch(x_t, t)
    resid = out - np.atleast_2d(target)
    values = np.sum(resid**2, axis=1)
    w = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=np.float64)
    trace = net.backward(trace, 2.0 * w[:, None] * resid)
    return values, trace.flat_gradient(), trace


def grad_sq_loss(
    net: EpsilonNet, x_t: np.ndarray, t: int, target: np.ndarray
) -> tuple[np.ndarray, LayerTrace]:
    _, grad, trace = sq_loss_batch(
        net, np.asarray(x_t, dtype=np.float64)[None, :], np.array([t]), np.asarray(target)[None, :]
    )
    return grad, trace


def output_jacobian(net: EpsilonNet, x_t: np.ndarray, t: int) -> np.ndarray:
    """(output_dim, param_count) Jacobian, one backward pass per output coordinate."""
    x_t = np.asarray(x_t, dtype=np.float64)[None, :]
    _, trace = net.forward_batch(x_t, np.array([t]))
    rows = []
    for r in range(net.output_dim):
        unit = np.zeros((1, net.output_dim))
        unit[0, r] = 1.0
        rows.append(net.backward(trace, unit).flat_gradient())
    return np.stack(rows)


def draw_sample(
    schedule: NoiseSchedule, x0: np.ndarray, sample_stream: RngStream, t: int | None = None
) -> tuple[int, np.ndarray, np.random.Generator]:
    """(t̃, ε) for one MC sample; ε is drawn before t̃ so fixed-t callers share ε.

    The generator is returned so callers can continue drawing (e.g. η) from it.
    """
    rng = sample_stream.generator()
    eps = rng.standard_normal(np.asarray(x0).shape[-1])
    t_draw = int(rng.integers(1, schedule.T + 1))
    return (t_draw if t is None else int(t)), eps, rng


def draw_samples(
    schedule: NoiseSchedule, x0: np.ndarray, stream: RngStream, S: int, t: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    ts = np.empty(S, dtype=np.int64)
    eps = np.empty((S, np.asarray(x0).shape[-1]))
    for s in range(S):
        ts[s], eps[s], _ = draw_sample(schedule, x0, stream.child("sample", s), t)
    return ts, eps


def per_example_train_gradient(
    net: EpsilonNet, schedule: NoiseSchedule, x0: np.ndarray, S: int, stream: RngStream
) -> np.ndarray:
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    x0 = np.asarray(x0, dtype=np.float64)
    ts, eps = draw_samples(schedule, x0, stream, S)
    x_t = q_sample(schedule, np.broadcast_to(x0, eps.shape), ts, eps)
    _, grad, _ = sq_loss_batch(net, x_t, ts, eps, np.full(S, 1.0 / S))
    return grad
