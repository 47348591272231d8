from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import ConfigurationError


@dataclass
class SGDMomentum:
    lr: float
    momentum: float = 0.9
    velocity: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.momentum * self.velocity + grad
        return params - self.lr * self.velocity


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.9, betas=(0.9, 0.999)):
    if name == "sgd":
        return SGDMomentum(lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(lr=lr, beta1=betas[0], beta2=betas[1])
    raise ConfigurationError(f"Unknown optimizer: {name!r}")
