"""
First-order parameter updates for flat float64 parameter vectors.

Updates return new arrays; the parameter vector passed in is never modified.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Adam:
    """Adam with bias correction."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """
        Take one step.

        Args:
            params: Current flat parameters
            grad: Gradient at params

        Returns:
            Updated parameters (a new array)
        """
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self):
        self.step_count = 0
        self.m = None
        self.v = None


@dataclass
class GradientDescent:
    """Plain gradient descent, used by the outer loop and the unrolled inner window."""
    lr: float

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad
