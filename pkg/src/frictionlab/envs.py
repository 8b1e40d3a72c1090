"""Environments: MNIST as a contextual bandit and token reversal.

Reversal layout: the model reads the ``H`` prompt tokens, a separator
(token id ``M``), and then its own response. Log-probs and updates are only
taken on the ``H`` response positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grad_engine import tape as T
from .grad_engine.models import TransformerConfig, TransformerDecoder, transformer_policy_forward

# ------------------------------------------------------------------------ IDX files

IDX_MAGIC = {"images": 0x00000803, "labels": 0x00000801}
IDX_RANK = {"images": 3, "labels": 1}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxShapeError(IdxError):
    pass


def parse_idx(blob: bytes, kind: str) -> np.ndarray:
    """Decode an unsigned-byte IDX file into a uint8 array."""
    if kind not in IDX_MAGIC:
        raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")
    if len(blob) < 4:
        raise IdxTruncatedError("IDX header shorter than the magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != IDX_MAGIC[kind]:
        raise IdxMagicError(f"bad IDX magic 0x{magic:08x} for {kind} (want 0x{IDX_MAGIC[kind]:08x})")
    rank = IDX_RANK[kind]
    head = 4 + 4 * rank
    if len(blob) < head:
        raise IdxTruncatedError("IDX header truncated")
    dims = struct.unpack(f">{rank}I", blob[4:head])
    if kind == "images" and dims[1:] != (28, 28):
        raise IdxShapeError(f"expected 28x28 images, got {dims[1:]}")
    n = int(np.prod(dims))
    if len(blob) < head + n:
        raise IdxTruncatedError(f"IDX body has {len(blob) - head} bytes, header promises {n}")
    if len(blob) > head + n:
        raise IdxShapeError(f"IDX body has {len(blob) - head - n} trailing bytes")
    return np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(dims).copy()


def serialize_idx(arr: np.ndarray, kind: str) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim != IDX_RANK[kind]:
        raise IdxShapeError(f"{kind} must be uint8 with rank {IDX_RANK[kind]}")
    return struct.pack(f">I{arr.ndim}I", IDX_MAGIC[kind], *arr.shape) + arr.tobytes()


MNIST_FILES = {
    ("train", "images"): "train-images-idx3-ubyte",
    ("train", "labels"): "train-labels-idx1-ubyte",
    ("test", "images"): "t10k-images-idx3-ubyte",
    ("test", "labels"): "t10k-labels-idx1-ubyte",
}
MNIST_SIZES = {"train": 60000, "test": 10000}


@dataclass(frozen=True)
class MnistDataset:
    images: np.ndarray  # (N, 28, 28) uint8
    labels: np.ndarray  # (N,) uint8
    split: str

    def __post_init__(self):
        if self.split not in MNIST_SIZES:
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.images) != len(self.labels):
            raise IdxShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and self.labels.max() > 9:
            raise IdxShapeError("labels must lie in 0..9")

    def __len__(self):
        return len(self.labels)

    def pixels(self, idx=None) -> np.ndarray:
        """Flattened images scaled into [0, 1]."""
        imgs = self.images if idx is None else self.images[idx]
        return imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0


def load_mnist(data_dir, split: str) -> MnistDataset:
    data_dir = Path(data_dir)
    arrays = {}
    for kind in ("images", "labels"):
        path = data_dir / MNIST_FILES[(split, kind)]
        if not path.exists():
            raise FileNotFoundError(f"missing MNIST file {path}; run `frictionlab fetch-data`")
        arrays[kind] = parse_idx(path.read_bytes(), kind)
    ds = MnistDataset(arrays["images"], arrays["labels"], split)
    if len(ds) != MNIST_SIZES[split]:
        raise IdxShapeError(f"{split} split has {len(ds)} examples, expected {MNIST_SIZES[split]}")
    return ds


def mnist_reward(action, true_label):
    """1 where the sampled label is right, else 0."""
    out = (np.asarray(action) == np.asarray(true_label)).astype(np.float64)
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------- reversal


@dataclass(frozen=True)
class ReversalSpec:
    M: int = 2
    H: int = 10
    kappa: float = 1.0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"vocabulary size M must be >= 2, got {self.M}")
        if self.H < 1:
            raise ValueError(f"horizon H must be >= 1, got {self.H}")
        if not -1.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [-1, 1], got {self.kappa}")

    @property
    def separator(self) -> int:
        return self.M

    def model_config(self, **kw) -> TransformerConfig:
        return TransformerConfig.for_reversal(self.M, self.H, **kw)


def sample_prompt(spec: ReversalSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform i.i.d. tokens: shape (H,) or (n, H)."""
    shape = (spec.H,) if n is None else (n, spec.H)
    return rng.integers(0, spec.M, size=shape)


def eval_prompts(spec: ReversalSpec, seed: int, n: int = 256) -> np.ndarray:
    """Fixed held-out prompt set for one seed, independent of the training stream."""
    return sample_prompt(spec, np.random.default_rng([seed, 0xE7A1]), n)


def prefix_correctness(response, prompt):
    """Length of the longest correct prefix of the reversal, as a fraction of H."""
    response, prompt = np.asarray(response), np.asarray(prompt)
    if response.shape != prompt.shape:
        raise ValueError(f"response shape {response.shape} != prompt shape {prompt.shape}")
    ok = response == prompt[..., ::-1]
    H = prompt.shape[-1]
    n_correct = np.where(ok.all(axis=-1), H, np.argmin(ok, axis=-1))
    out = n_correct / H
    return float(out) if np.ndim(out) == 0 else out


def shaped_reward(c, kappa: float):
    c = np.asarray(c, dtype=np.float64)
    if np.any((c < 0) | (c > 1)):
        raise ValueError("correctness must lie in [0, 1]")
    out = kappa * c + (1.0 - kappa) * (c == 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class Episode:
    prompt: np.ndarray
    response: np.ndarray
    behavior_logp: np.ndarray | None
    raw_reward: float
    reward: float
    correctness: float
    learner_logp: np.ndarray | None = None
    bug_injected: bool = False
    oracle_injected: bool = False
    reward_corrupted: bool = False
    actor_version: int = -1


@dataclass
class EpisodeBatch:
    """Struct-of-arrays view of a batch of episodes (what the learner consumes)."""

    prompts: np.ndarray  # (N, H)
    responses: np.ndarray  # (N, H)
    behavior_logp: np.ndarray | None  # (N, H)
    correctness: np.ndarray
    raw_reward: np.ndarray
    reward: np.ndarray
    bug_injected: np.ndarray
    oracle_injected: np.ndarray
    reward_corrupted: np.ndarray
    actor_version: np.ndarray
    group: np.ndarray = field(default=None)  # prompt index of each episode

    def __len__(self):
        return len(self.prompts)

    def episodes(self) -> list[Episode]:
        out = []
        for i in range(len(self)):
            out.append(Episode(
                self.prompts[i], self.responses[i],
                None if self.behavior_logp is None else self.behavior_logp[i],
                float(self.raw_reward[i]), float(self.reward[i]), float(self.correctness[i]),
                bug_injected=bool(self.bug_injected[i]), oracle_injected=bool(self.oracle_injected[i]),
                reward_corrupted=bool(self.reward_corrupted[i]), actor_version=int(self.actor_version[i])))
        return out

    @classmethod
    def from_episodes(cls, eps: list[Episode], group=None) -> "EpisodeBatch":
        blp = None if any(e.behavior_logp is None for e in eps) else np.stack([e.behavior_logp for e in eps])
        return cls(
            np.stack([e.prompt for e in eps]), np.stack([e.response for e in eps]), blp,
            np.array([e.correctness for e in eps]), np.array([e.raw_reward for e in eps]),
            np.array([e.reward for e in eps]), np.array([e.bug_injected for e in eps]),
            np.array([e.oracle_injected for e in eps]), np.array([e.reward_corrupted for e in eps]),
            np.array([e.actor_version for e in eps]),
            np.arange(len(eps)) if group is None else np.asarray(group))


def _draw(logp: np.ndarray, rng: np.random.Generator, mode: str) -> np.ndarray:
    if mode == "greedy":
        return np.argmax(logp, axis=-1)  # ties go to the lowest id
    u = rng.random(logp.shape[0])
    cdf = np.cumsum(np.exp(logp.astype(np.float64)), axis=-1)
    cdf /= cdf[:, -1:]
    return np.minimum((u[:, None] > cdf).sum(axis=-1), logp.shape[-1] - 1)


def generate(params, spec: ReversalSpec, prompts: np.ndarray, rng: np.random.Generator | None,
             mode: str = "sample", cfg: TransformerConfig | None = None):
    """Batched autoregressive decode. Returns (responses, per-token log-probs), both (N, H).

    ``params`` may be stacked per row (leading batch axis), one actor per prompt.
    """
    if mode not in ("sample", "greedy"):
        raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs a generator")
    cfg = cfg or spec.model_config()
    prompts = np.atleast_2d(prompts)
    N, H = prompts.shape
    dec = TransformerDecoder(params, cfg, N)
    seq = np.concatenate([prompts, np.full((N, 1), spec.separator)], axis=1)
    logp = dec.step(seq)[:, -1]
    responses = np.empty((N, H), dtype=np.int64)
    token_logp = np.empty((N, H))
    rows = np.arange(N)
    for t in range(H):
        tok = _draw(logp, rng, mode)
        responses[:, t] = tok
        token_logp[:, t] = logp[rows, tok]
        if t + 1 < H:
            logp = dec.step(tok[:, None])[:, -1]
    return responses, token_logp


def rollout(actor_params, spec: ReversalSpec, prompt, rng, mode: str = "sample",
            actor_version: int = -1) -> Episode:
    """One episode: prompt, separator, then H generated tokens."""
    prompt = np.asarray(prompt)
    resp, logp = generate(actor_params, spec, prompt[None], rng, mode)
    c = prefix_correctness(resp[0], prompt)
    r = shaped_reward(c, spec.kappa)
    return Episode(prompt, resp[0], logp[0], r, r, c, actor_version=actor_version)


def training_inputs(spec: ReversalSpec, prompts: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """Teacher-forced context whose last H positions predict the response tokens."""
    sep = np.full((len(prompts), 1), spec.separator)
    return np.concatenate([prompts, sep, responses[:, :-1]], axis=1)


def response_logp(params, spec: ReversalSpec, prompts, responses, cfg: TransformerConfig | None = None):
    """Full-context (uncached) log-probs of ``responses``: (N, H), tape-aware."""
    cfg = cfg or spec.model_config()
    lp = transformer_policy_forward(params, training_inputs(spec, prompts, responses), cfg)
    # positions H .. 2H-1 predict response tokens 0 .. H-1
    return T.take_last(T.slice_time(lp, spec.H), np.asarray(responses))


def sequence_error(params, spec: ReversalSpec, prompts: np.ndarray,
                   cfg: TransformerConfig | None = None) -> float:
    """Fraction of prompts whose greedy decode is not the exact reversal."""
    prompts = np.atleast_2d(prompts)
    if prompts.size == 0:
        raise ValueError("evaluation set is empty")
    resp, _ = generate(params, spec, prompts, None, "greedy", cfg)
    return float(np.mean(np.any(resp != prompts[:, ::-1], axis=1)))
