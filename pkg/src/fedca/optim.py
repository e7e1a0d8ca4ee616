"""Flat-vector optimisers. Weight decay is L2 added to the gradient."""
from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad + self.weight_decay * theta if self.weight_decay else grad
        return theta - self.lr * g


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad + self.weight_decay * theta if self.weight_decay else grad
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, size: int, lr: float, weight_decay: float = 0.0):
    if name == "adam":
        return Adam(size, lr, weight_decay)
    if name == "sgd":
        return SGD(lr, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
