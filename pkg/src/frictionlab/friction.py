"""Distributed-friction injectors and the actor checkpoint buffer.

``apply_frictions`` runs the per-episode pipeline in a fixed order:

1. pick the actor (uniform over stored checkpoints, or the current learner),
2. roll out,
3. maybe replace with an oracle episode,
4. maybe replace with an all-zeros bug episode (so bug wins over oracle),
5. shape the reward from correctness with kappa,
6. maybe replace the reward with a fair coin.

Randomness for a step is drawn only when the matching probability is
positive, so a zero config consumes the generator exactly like plain
on-policy rollouts do.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .envs import (Episode, EpisodeBatch, ReversalSpec, generate, prefix_correctness,
                   shaped_reward)
from .grad_engine import serialize

CURRENT = -1  # version id reported when the actor is the live learner


@dataclass(frozen=True)
class FrictionConfig:
    D: int = 0
    p_E: float = 0.0
    p_R: float = 0.0
    p_C: float = 0.0
    kappa: float = 1.0
    fixed_lag: bool = False  # actor = oldest stored checkpoint instead of a uniform draw

    def __post_init__(self):
        if int(self.D) != self.D or self.D < 0:
            raise ValueError(f"delay D must be a non-negative integer, got {self.D}")
        for name in ("p_E", "p_R", "p_C"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not -1.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [-1, 1], got {self.kappa}")

    @classmethod
    def combined(cls) -> "FrictionConfig":
        """All four frictions at their single-friction operating points, hedonic trap."""
        return cls(D=30, p_E=3e-3, p_R=0.01, p_C=1e-3, kappa=-1.0)


class CheckpointBuffer:
    """Ring of the last ``capacity`` learner snapshots.

    Snapshots live in one preallocated bank per parameter so that gathering
    a different actor for every row of a batch is a single fancy index.
    """

    def __init__(self, capacity: int, fixed_lag: bool = False):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.fixed_lag = fixed_lag
        self.banks: dict[str, np.ndarray] | None = None
        self.versions = np.full(self.capacity, -1, dtype=np.int64)
        self.pushed = 0  # total pushes, which is also the newest version id

    def __len__(self):
        return min(self.pushed, self.capacity)

    def push(self, params: dict[str, np.ndarray]) -> int:
        """Store a copy of ``params``; returns its version id (1, 2, 3, ...)."""
        self.pushed += 1
        version = self.pushed
        if self.capacity == 0:
            return version
        if self.banks is None:
            self.banks = {k: np.empty((self.capacity,) + v.shape, v.dtype) for k, v in params.items()}
        slot = version % self.capacity
        for k, v in params.items():
            self.banks[k][slot] = v
        self.versions[slot] = version
        return version

    def stored_versions(self) -> np.ndarray:
        return np.sort(self.versions[self.versions >= 0])

    def _slot(self, version: int) -> int:
        slot = version % self.capacity
        if self.versions[slot] != version:
            raise KeyError(f"version {version} is not in the buffer")
        return slot

    def get(self, version: int) -> dict[str, np.ndarray]:
        slot = self._slot(version)
        return {k: b[slot] for k, b in self.banks.items()}

    def gather(self, versions: np.ndarray) -> dict[str, np.ndarray]:
        """Parameters stacked along a new leading axis, row i = ``versions[i]``."""
        slots = np.asarray(versions) % self.capacity
        if np.any(self.versions[slots] != versions):
            raise KeyError("requested versions are not all in the buffer")
        return {k: b[slots] for k, b in self.banks.items()}

    def sample_versions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Actor version per row; ``CURRENT`` when nothing is stored."""
        if len(self) == 0:
            return np.full(n, CURRENT, dtype=np.int64)
        stored = self.stored_versions()
        if self.fixed_lag:
            return np.full(n, stored[0], dtype=np.int64)
        return stored[rng.integers(0, len(stored), size=n)]

    # persistence in the grad_engine snapshot format, one blob per version
    def dumps(self) -> bytes:
        buf = io.BytesIO()
        vs = self.stored_versions()
        buf.write(struct.pack("<QQQQ", self.capacity, int(self.fixed_lag), self.pushed, len(vs)))
        for v in vs:
            blob = serialize.dumps(self.get(int(v)))
            buf.write(struct.pack("<QQ", int(v), len(blob)))
            buf.write(blob)
        return buf.getvalue()

    @classmethod
    def loads(cls, blob: bytes, dtype=np.float64) -> "CheckpointBuffer":
        capacity, fixed, pushed, count = struct.unpack_from("<QQQQ", blob, 0)
        buf = cls(capacity, bool(fixed))
        pos = 32
        for _ in range(count):
            v, n = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            buf.pushed = v - 1
            buf.push(serialize.loads(blob[pos:pos + n], dtype))
            pos += n
        if pos != len(blob):
            raise ValueError("trailing bytes after checkpoint buffer")
        buf.pushed = pushed
        return buf


def push_checkpoint(buffer: CheckpointBuffer, snapshot: dict[str, np.ndarray]) -> CheckpointBuffer:
    buffer.push(snapshot)
    return buffer


def sample_actor(buffer: CheckpointBuffer, current_params, rng: np.random.Generator):
    """One actor draw: (params, version); the live learner when the buffer is empty."""
    v = int(buffer.sample_versions(rng, 1)[0])
    if v == CURRENT:
        return current_params, CURRENT
    return buffer.get(v), v


# --------------------------------------------------------------- single episodes


def inject_bug(episode: Episode, p_E: float, rng: np.random.Generator, spec: ReversalSpec) -> Episode:
    """With probability ``p_E`` the actor emits all zeros; behavior log-probs become 0."""
    if p_E <= 0 or rng.random() >= p_E:
        return episode
    resp = np.zeros_like(episode.prompt)
    c = prefix_correctness(resp, episode.prompt)
    r = shaped_reward(c, spec.kappa)
    return replace(episode, response=resp, behavior_logp=np.zeros(spec.H), correctness=c,
                   raw_reward=r, reward=r, bug_injected=True)


def corrupt_reward(reward: float, p_R: float, rng: np.random.Generator) -> tuple[float, bool]:
    """With probability ``p_R`` the reward becomes a fair coin in {0, 1}."""
    if p_R <= 0 or rng.random() >= p_R:
        return reward, False
    return float(rng.integers(0, 2)), True


def inject_oracle(prompt: np.ndarray, p_C: float, rng: np.random.Generator,
                  spec: ReversalSpec) -> Episode | None:
    """With probability ``p_C`` a perfect-reversal episode; otherwise ``None``."""
    if p_C <= 0 or rng.random() >= p_C:
        return None
    prompt = np.asarray(prompt)
    return Episode(prompt, prompt[::-1].copy(), np.zeros(spec.H), 1.0, 1.0, 1.0, oracle_injected=True)


# ------------------------------------------------------------------------ batches


def _coin_mask(p: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if p <= 0:
        return np.zeros(n, dtype=bool)
    return rng.random(n) < p


def apply_frictions(prompts: np.ndarray, learner_params, buffer: CheckpointBuffer,
                    config: FrictionConfig, rng: np.random.Generator, spec: ReversalSpec,
                    group: np.ndarray | None = None, model_cfg=None) -> EpisodeBatch:
    """Roll out one episode per prompt row under the configured frictions."""
    prompts = np.atleast_2d(prompts)
    N = len(prompts)
    if config.D > 0 and len(buffer) > 0:
        versions = buffer.sample_versions(rng, N)
        actor = buffer.gather(versions)
    else:
        versions = np.full(N, CURRENT, dtype=np.int64)
        actor = learner_params
    responses, blp = generate(actor, spec, prompts, rng, "sample", model_cfg)

    oracle = _coin_mask(config.p_C, N, rng)
    responses[oracle] = prompts[oracle][:, ::-1]
    blp[oracle] = 0.0

    bug = _coin_mask(config.p_E, N, rng)
    responses[bug] = 0
    blp[bug] = 0.0

    c = prefix_correctness(responses, prompts)
    raw = shaped_reward(c, config.kappa)
    corrupted = _coin_mask(config.p_R, N, rng)
    reward = raw.copy()
    if corrupted.any():
        reward[corrupted] = rng.integers(0, 2, size=int(corrupted.sum())).astype(np.float64)
    return EpisodeBatch(prompts, responses, blp, np.atleast_1d(c), np.atleast_1d(raw), reward, bug,
                        oracle, corrupted, versions, np.arange(N) if group is None else group)
