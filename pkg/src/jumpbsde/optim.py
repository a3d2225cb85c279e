"""Gradient-descent optimizers acting on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PiecewiseConstant:
    """Learning rate ``rates[k]`` from iteration ``boundaries[k-1]`` on."""

    rates: tuple
    boundaries: tuple = ()

    def __call__(self, iteration):
        return self.rates[int(np.searchsorted(self.boundaries, iteration, side="right"))]


class SGD:
    def __init__(self, schedule):
        self.schedule = schedule
        self.iteration = 0

    def step(self, params, grad):
        lr = self.schedule(self.iteration)
        self.iteration += 1
        return params - lr * grad


class Adam:
    """Adam with bias correction."""

    def __init__(self, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None
        self.iteration = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        lr = self.schedule(self.iteration)
        self.iteration += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.iteration)
        v_hat = self.v / (1.0 - self.beta2 ** self.iteration)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_by_norm(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm)
    return grad
