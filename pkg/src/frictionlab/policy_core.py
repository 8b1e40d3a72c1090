"""Scalar delight math shared by the theory path and every estimator.

Surprisal is the negative log-probability of the taken action under the
*learner's current* policy; delight is advantage times surprisal, and the
gate is ``sigmoid(delight / eta)``. The gate is always treated as a constant
with respect to the policy parameters.

All functions accept python floats or numpy arrays (elementwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_PROB_SLACK = 1e-9


@dataclass(frozen=True)
class GateTemperature:
    eta: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"gate temperature must be positive and finite, got {self.eta}")


@dataclass(frozen=True)
class SampleSignal:
    log_prob: float
    advantage: float

    @property
    def surprisal(self) -> float:
        return float(surprisal(self.log_prob))

    @property
    def delight(self) -> float:
        return self.advantage * self.surprisal


def _eta(eta):
    if isinstance(eta, GateTemperature):
        return eta.eta
    if np.ndim(eta):
        eta = np.asarray(eta, dtype=np.float64)
        if not np.all(np.isfinite(eta) & (eta > 0)):
            raise ValueError("gate temperatures must be positive and finite")
        return eta
    return GateTemperature(float(eta)).eta


def stable_sigmoid(x):
    """Logistic function evaluated without overflow for large ``|x|``."""
    x_arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x_arr)):
        raise ValueError("stable_sigmoid received a non-finite input")
    # exp(-|x|) never overflows; pick the algebraically equivalent branch per sign.
    e = np.exp(-np.abs(x_arr))
    out = np.where(x_arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def surprisal(log_prob):
    """``-log_prob``; log-probs up to 1e-9 above zero are clamped to zero."""
    lp = np.asarray(log_prob, dtype=np.float64)
    if np.any(lp > LOG_PROB_SLACK) or np.any(np.isnan(lp)):
        raise ValueError(f"log-probability must be <= 0, got max {np.max(lp)}")
    out = -np.minimum(lp, 0.0)
    return float(out) if out.ndim == 0 else out


def gate_weight(advantage, surprisal_value, eta=1.0):
    """Delight gate ``sigmoid(advantage * surprisal / eta)``."""
    s = np.asarray(surprisal_value, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("surprisal must be non-negative")
    return stable_sigmoid(np.asarray(advantage, dtype=np.float64) * s / _eta(eta))


def dg_coefficient(advantage, log_prob, eta=1.0):
    """Scalar that multiplies the score of a sample under the delight-gated update."""
    out = gate_weight(advantage, surprisal(log_prob), eta) * np.asarray(advantage, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out
