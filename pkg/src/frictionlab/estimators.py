"""Update construction: per-token (or per-sample) coefficients and surrogate losses.

Every coefficient method turns into the loss ``-sum_t c_t * logp_t / N`` with
``c_t`` held constant, so its tape gradient is the intended update. PMPO is
the one method whose loss is not of that form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad_engine import tape as T
from .policy_core import GateTemperature, dg_coefficient

KINDS = ("reinforce", "is_pg", "ppo", "pmpo", "dg")
RATIO_KINDS = ("is_pg", "ppo")
MAX_LOG_RATIO = 50.0


def _parse_kv(text: str) -> tuple[str, dict[str, float]]:
    head, _, rest = text.strip().partition(":")
    kw = {}
    for part in filter(None, rest.split(",")):
        k, eq, v = part.partition("=")
        if not eq:
            raise ValueError(f"expected key=value in {text!r}")
        kw[k.strip()] = float(v)
    return head.strip().lower(), kw


@dataclass(frozen=True)
class EstimatorKind:
    name: str
    eta: float = 1.0  # dg
    eps: float = 0.2  # ppo
    alpha: float = 1.0  # pmpo
    gamma: float = 1e-9  # pmpo

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown estimator {self.name!r}; choose from {KINDS}")
        if self.name == "dg":
            GateTemperature(self.eta)
        if self.name == "ppo" and not self.eps > 0:
            raise ValueError("ppo epsilon must be > 0")
        if self.name == "pmpo" and (self.alpha < 0 or not self.gamma > 0):
            raise ValueError("pmpo needs alpha >= 0 and gamma > 0")

    @classmethod
    def parse(cls, text: str) -> "EstimatorKind":
        name, kw = _parse_kv(text)
        allowed = {"dg": {"eta"}, "ppo": {"eps"}, "pmpo": {"alpha", "gamma"}}.get(name, set())
        extra = set(kw) - allowed
        if extra:
            raise ValueError(f"estimator {name!r} takes no option(s) {sorted(extra)}")
        return cls(name, **kw)

    def __str__(self) -> str:
        if self.name == "dg":
            return f"dg:eta={self.eta:g}"
        if self.name == "ppo":
            return f"ppo:eps={self.eps:g}"
        if self.name == "pmpo":
            return f"pmpo:alpha={self.alpha:g}" + ("" if self.gamma == 1e-9 else f",gamma={self.gamma:g}")
        return self.name

    @property
    def needs_behavior(self) -> bool:
        return self.name in RATIO_KINDS


BASELINES = ("zero", "constant", "expected", "oracle", "grouped")


@dataclass(frozen=True)
class BaselineKind:
    name: str
    group_size: int = 0

    def __post_init__(self):
        if self.name not in BASELINES:
            raise ValueError(f"unknown baseline {self.name!r}; choose from {BASELINES}")
        if self.name == "grouped" and self.group_size < 2:
            raise ValueError("grouped baseline needs group size >= 2")

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        head, _, rest = text.strip().partition(":")
        head = head.lower()
        if head == "grouped":
            return cls("grouped", int(rest or 0))
        if rest:
            raise ValueError(f"baseline {head!r} takes no argument")
        return cls(head)

    def __str__(self) -> str:
        return f"grouped:{self.group_size}" if self.name == "grouped" else self.name


# --------------------------------------------------------------------- advantages


def grouped_advantages(rewards) -> np.ndarray:
    """``R_i - mean(R)`` within one group of responses to the same prompt."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"grouped baseline needs at least 2 rewards, got {r.size}")
    return r - r.mean()


def grouped_advantages_batch(rewards: np.ndarray, group: np.ndarray) -> np.ndarray:
    """Grouped advantages for a flat batch with a prompt index per episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    for g in np.unique(group):
        idx = group == g
        out[idx] = grouped_advantages(rewards[idx])
    return out


def mnist_advantage(reward, probs, true_label=None, kind: BaselineKind | str = "expected"):
    """Advantage of sampled labels under an MNIST baseline.

    ``probs`` is the learner's policy row(s) over the 10 labels. The expected
    and oracle baselines both equal pi(y|x) for this indicator reward.
    """
    kind = BaselineKind.parse(kind) if isinstance(kind, str) else kind
    r = np.asarray(reward, dtype=np.float64)
    if kind.name == "zero":
        out = r
    elif kind.name == "constant":
        out = r - 0.5
    elif kind.name in ("expected", "oracle"):
        if true_label is None:
            raise ValueError(f"{kind.name} baseline needs the true label")
        p = np.asarray(probs, dtype=np.float64)
        y = np.asarray(true_label)
        out = r - (p[y] if p.ndim == 1 else p[np.arange(len(p)), y])
    else:
        raise ValueError("the grouped baseline is not defined for MNIST")
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------------ coefficients


def _log_ratio(learner_logp, behavior_logp):
    if behavior_logp is None:
        raise ValueError("ratio-based estimators need behavior log-probs")
    lr = np.asarray(learner_logp, dtype=np.float64) - np.asarray(behavior_logp, dtype=np.float64)
    if np.any(lr > MAX_LOG_RATIO):
        raise FloatingPointError(f"importance ratio exceeds e^{MAX_LOG_RATIO:g}")
    return lr


def token_coefficients(advantages, learner_logp, estimator: EstimatorKind, behavior_logp=None) -> np.ndarray:
    """Score-function coefficient per token.

    ``advantages`` has one entry per episode (broadcast over tokens) or
    already matches ``learner_logp``. Only ratio methods look at
    ``behavior_logp``.
    """
    lp = np.asarray(learner_logp, dtype=np.float64)
    U = np.asarray(advantages, dtype=np.float64)
    if U.ndim < lp.ndim:
        U = U.reshape(U.shape + (1,) * (lp.ndim - U.ndim))
    U = np.broadcast_to(U, lp.shape)
    name = estimator.name
    if name == "reinforce":
        c = U.copy()
    elif name == "dg":
        c = np.asarray(dg_coefficient(U, lp, estimator.eta), dtype=np.float64).reshape(lp.shape)
    elif name == "is_pg":
        c = U * np.exp(_log_ratio(lp, behavior_logp))
    elif name == "ppo":
        r = np.exp(_log_ratio(lp, behavior_logp))
        clipped = ((U > 0) & (r > 1 + estimator.eps)) | ((U < 0) & (r < 1 - estimator.eps))
        c = np.where(clipped, 0.0, r * U)
    else:
        raise ValueError("pmpo has no per-token coefficient; use surrogate_loss")
    if not np.all(np.isfinite(c)):
        raise FloatingPointError("non-finite update coefficient")
    return c


def coefficient_loss(learner_logp, coef: np.ndarray, n_episodes: int):
    """``-sum(c * logp) / n`` with ``c`` constant."""
    return T.mul(T.total(T.mul(learner_logp, -np.asarray(coef))), 1.0 / n_episodes)


def pmpo_loss(learner_logp, advantages, alpha: float, gamma: float = 1e-9):
    """``-[sum_{U>0} logp + alpha * sum_{U<0} log(1 - p + gamma)] / n``."""
    # 1 + gamma is not representable in single precision
    learner_logp = T.cast(learner_logp, np.float64)
    lp = T.data(learner_logp)
    U = np.asarray(advantages, dtype=np.float64)
    n = len(U)
    pos = (U > 0).astype(lp.dtype)
    neg = (U < 0).astype(lp.dtype)
    shape = (n,) + (1,) * (lp.ndim - 1)
    pref = T.total(T.mul(learner_logp, pos.reshape(shape)))
    disp_terms = T.log(T.add(T.neg(T.exp(learner_logp)), 1.0 + gamma))
    disp = T.total(T.mul(disp_terms, neg.reshape(shape)))
    return T.mul(T.add(pref, T.mul(disp, alpha)), -1.0 / n)


def surrogate_loss(learner_logp, advantages, estimator: EstimatorKind, behavior_logp=None):
    """Scalar loss whose tape gradient is the estimator's update (to be minimized).

    ``learner_logp`` is the tape tensor of per-token (or per-sample) log-probs
    of the taken actions, with episodes on the leading axis.
    """
    n = len(np.asarray(advantages))
    if estimator.name == "pmpo":
        loss = pmpo_loss(learner_logp, advantages, estimator.alpha, estimator.gamma)
    else:
        coef = token_coefficients(advantages, T.data(learner_logp), estimator, behavior_logp)
        loss = coefficient_loss(learner_logp, coef.astype(T.data(learner_logp).dtype), n)
    if not np.isfinite(np.asarray(T.data(loss))):
        lp = np.asarray(T.data(learner_logp), dtype=np.float64).reshape(n, -1)
        with np.errstate(all="ignore"):
            terms = lp if estimator.name != "pmpo" else np.log(1 - np.exp(lp) + estimator.gamma) + lp
        bad = np.flatnonzero(~np.all(np.isfinite(terms), axis=1))
        raise FloatingPointError(f"non-finite surrogate loss (episode {bad[0] if bad.size else '?'})")
    return loss
