"""Adaptive learning rate clipping of loss values.

A running-moment threshold T = mu1 + n * sqrt(mu2 - mu1^2) caps each loss:
values at or below T pass through untouched, values above come back with
magnitude T and gradient scaled by T / L.  Moments update with the clipped
value so a single spike cannot inflate the threshold permanently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass
class AlrcState:
    """Running raw moments of the clipped loss stream (float64)."""

    mu1: float = 25.0
    mu2: float = 30.0
    decay: float = 0.999
    n: float = 3.0

    def threshold(self) -> float:
        return self.mu1 + self.n * np.sqrt(max(self.mu2 - self.mu1 ** 2, 0.0))

    def update(self, clipped_value: float):
        b = self.decay
        self.mu1 = b * self.mu1 + (1.0 - b) * clipped_value
        self.mu2 = b * self.mu2 + (1.0 - b) * clipped_value ** 2


def alrc(loss: ad.Tensor, state: AlrcState) -> ad.Tensor:
    """Clip a scalar loss tensor against the running threshold."""
    value = loss.item()
    if value < 0:
        raise ContractError(f"alrc expects a non-negative loss, got {value}")
    t = state.threshold()
    if value <= t:
        state.update(value)
        return loss
    out = ad.mul(loss, t / value)
    state.update(t)
    return out
