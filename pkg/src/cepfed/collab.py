"""Risk-matrix dynamics and the server's historical gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ParameterSet, StructuralError, dot, weighted_sum


@dataclass(frozen=True)
class CollabConfig:
    lambda_step: float = 0.01
    delta_scale: float = 0.1
    n_clients: int = 5

    def __post_init__(self):
        if self.lambda_step < 0 or self.delta_scale < 0:
            raise ValueError("lambda_step and delta_scale must be non-negative")
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")


class RiskMatrix:
    """n x n trust weights; row i weights every client's gradient for client i."""

    def __init__(self, alpha):
        alpha = np.array(alpha, dtype=np.float64)
        if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
            raise ValueError("risk matrix must be square")
        if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
            raise ValueError("risk matrix entries must be finite and non-negative")
        self.alpha = alpha

    @classmethod
    def uniform(cls, n: int) -> "RiskMatrix":
        return cls(np.full((n, n), 1.0 / n))

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.alpha[i].copy()

    def copy(self) -> "RiskMatrix":
        return RiskMatrix(self.alpha)


def alignment_score(loss_ce: float, grad: ParameterSet, params: ParameterSet) -> float:
    """Cross-entropy minus <grad, params>; lower means a better-aligned update."""
    value = float(loss_ce) - dot(grad, params)
    if not math.isfinite(value):
        raise FloatingPointError("alignment score is not finite")
    return value


def update_risk_row(row, scores, consistency: float, lambda_step: float) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if row.shape != scores.shape:
        raise ValueError("row and scores must have the same length")
    if np.any(row < 0):
        raise ValueError("risk row entries must be non-negative")
    out = np.maximum(row - lambda_step * (scores + consistency), 0.0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("risk row update produced non-finite values")
    return out


def correct_gradient(raw: ParameterSet, risk_grad: ParameterSet) -> ParameterSet:
    return raw + risk_grad


def historical_average_gradient(grads: Sequence[ParameterSet], delta_scale: float) -> ParameterSet:
    if not grads:
        raise ValueError("need at least one gradient")
    n = len(grads)
    return weighted_sum([delta_scale / n] * n, grads)


def historical_risk_gradient(alpha_row, grads: Sequence[ParameterSet]) -> ParameterSet:
    """sum_j alpha_row[j] * grads[j]."""
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if alpha_row.ndim != 1 or len(alpha_row) != len(grads):
        raise StructuralError(f"{len(alpha_row)} weights for {len(grads)} gradients")
    return weighted_sum(alpha_row.tolist(), grads)
