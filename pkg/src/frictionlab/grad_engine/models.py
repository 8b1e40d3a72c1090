"""Policy networks: the MNIST ReLU MLP and a pre-norm causal transformer.

Both forward functions work on a tape (pass tensors from ``Tape.watch``)
or on plain arrays for inference. ``TransformerDecoder`` is a
cached incremental forward used for rollouts; it accepts parameters stacked
along a leading batch axis so each episode can run a different actor
checkpoint in one batched pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T

ParamDict = dict[str, np.ndarray]


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------------- MLP


@dataclass(frozen=True)
class MLPConfig:
    n_in: int = 784
    hidden: int = 100
    n_out: int = 10


def init_mlp(cfg: MLPConfig, rng: np.random.Generator, dtype=np.float64) -> ParamDict:
    return {
        "w1": _normal(rng, (cfg.n_in, cfg.hidden), 1 / np.sqrt(cfg.n_in), dtype),
        "b1": np.zeros(cfg.hidden, dtype),
        "w2": _normal(rng, (cfg.hidden, cfg.n_out), 1 / np.sqrt(cfg.hidden), dtype),
        "b2": np.zeros(cfg.n_out, dtype),
    }


def mlp_policy_forward(params, images):
    """Log-probabilities over labels, shape ``(B, n_out)``."""
    x = T.data(images)
    w1 = T.data(params["w1"])
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ValueError(f"expected images of shape (B, {w1.shape[0]}), got {x.shape}")
    h = T.relu(T.add(T.matmul(images, params["w1"]), params["b1"]))
    logits = T.add(T.matmul(h, params["w2"]), params["b2"])
    return T.log_softmax(logits)


# -------------------------------------------------------------------- transformer


@dataclass(frozen=True)
class TransformerConfig:
    n_vocab_in: int = 3  # M data tokens + separator
    n_vocab_out: int = 2  # M data tokens
    max_len: int = 21
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    d_ff: int = 128
    ln_eps: float = 1e-5

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def for_reversal(cls, M: int, H: int, **kw) -> "TransformerConfig":
        return cls(n_vocab_in=M + 1, n_vocab_out=M, max_len=2 * H + 1, **kw)


def init_transformer(cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float64) -> ParamDict:
    if cfg.d_model % cfg.n_heads:
        raise ValueError("d_model must be divisible by n_heads")
    d, f = cfg.d_model, cfg.d_ff
    p = {
        "tok_emb": _normal(rng, (cfg.n_vocab_in, d), 0.02, dtype),
        "pos_emb": _normal(rng, (cfg.max_len, d), 0.02, dtype),
    }
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1"] = np.ones(d, dtype)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{w}"] = _normal(rng, (d, d), 1 / np.sqrt(d), dtype)
        p[f"l{i}.ln2"] = np.ones(d, dtype)
        p[f"l{i}.ff1"] = _normal(rng, (d, f), 1 / np.sqrt(d), dtype)
        p[f"l{i}.ff2"] = _normal(rng, (f, d), 1 / np.sqrt(f), dtype)
    p["ln_f"] = np.ones(d, dtype)
    p["head"] = _normal(rng, (d, cfg.n_vocab_out), 1 / np.sqrt(d), dtype)
    return p


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    m = np.zeros((n, n), dtype)
    m[np.triu_indices(n, 1)] = -np.inf
    return m


def transformer_from_embeddings(params, x, cfg: TransformerConfig):
    """Run the decoder stack on already-embedded inputs ``x`` of shape (B, T, d)."""
    B, n, d = T.data(x).shape
    H, dh = cfg.n_heads, cfg.d_head
    mask = causal_mask(n, T.data(x).dtype)
    scale = 1.0 / float(np.sqrt(dh))

    def heads(t):
        return T.transpose(T.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        h = T.layer_norm(x, params[f"l{i}.ln1"], cfg.ln_eps)
        q = heads(T.matmul(h, params[f"l{i}.wq"]))
        k = heads(T.matmul(h, params[f"l{i}.wk"]))
        v = heads(T.matmul(h, params[f"l{i}.wv"]))
        scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), mask)
        att = T.matmul(T.softmax(scores), v)
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, n, d))
        x = T.add(x, T.matmul(att, params[f"l{i}.wo"]))
        h = T.layer_norm(x, params[f"l{i}.ln2"], cfg.ln_eps)
        x = T.add(x, T.matmul(T.relu(T.matmul(h, params[f"l{i}.ff1"])), params[f"l{i}.ff2"]))
    h = T.layer_norm(x, params["ln_f"], cfg.ln_eps)
    return T.log_softmax(T.matmul(h, params["head"]))


def embed_tokens(params, tokens: np.ndarray):
    n = tokens.shape[1]
    return T.add(T.embedding(params["tok_emb"], tokens), T.embedding(params["pos_emb"], np.arange(n)))


def transformer_policy_forward(params, tokens, cfg: TransformerConfig):
    """Log-probabilities over output tokens, shape ``(B, T, n_vocab_out)``."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must have shape (B, T)")
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"context of {tokens.shape[1]} exceeds max_len={cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.n_vocab_in:
        raise ValueError("token id out of vocabulary")
    return transformer_from_embeddings(params, embed_tokens(params, tokens), cfg)


# --------------------------------------------------------------- cached decoding


def stack_params(snapshots: list[ParamDict], index: np.ndarray) -> ParamDict:
    """Per-row parameters: row ``b`` uses ``snapshots[index[b]]``."""
    out = {}
    for k in snapshots[0]:
        bank = np.stack([s[k] for s in snapshots])
        out[k] = bank[index]
    return out


class TransformerDecoder:
    """Incremental forward with a key/value cache.

    ``params`` entries either have their usual shape (shared by the whole
    batch) or an extra leading batch axis (one actor per row).
    """

    def __init__(self, params: ParamDict, cfg: TransformerConfig, batch: int):
        self.p = params
        self.cfg = cfg
        self.B = batch
        self.stacked = params["head"].ndim == 3
        self.pos = 0
        self.k: list[np.ndarray | None] = [None] * cfg.n_layers
        self.v: list[np.ndarray | None] = [None] * cfg.n_layers

    def _gain(self, name):
        g = self.p[name]
        return g[:, None, :] if self.stacked else g

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed ``tokens`` (B, n) at the next positions; returns log-probs (B, n, V_out)."""
        cfg, p, B = self.cfg, self.p, self.B
        n = tokens.shape[1]
        start = self.pos
        if start + n > cfg.max_len:
            raise ValueError(f"context of {start + n} exceeds max_len={cfg.max_len}")
        if self.stacked:
            x = p["tok_emb"][np.arange(B)[:, None], tokens] + p["pos_emb"][:, start:start + n]
        else:
            x = p["tok_emb"][tokens] + p["pos_emb"][start:start + n]
        Hh, dh = cfg.n_heads, cfg.d_head
        mask = causal_mask(start + n, x.dtype)[start:start + n]
        scale = 1.0 / float(np.sqrt(dh))
        for i in range(cfg.n_layers):
            h = T.layer_norm(x, self._gain(f"l{i}.ln1"), cfg.ln_eps)
            q, k, v = (np.transpose((h @ p[f"l{i}.{w}"]).reshape(B, n, Hh, dh), (0, 2, 1, 3))
                       for w in ("wq", "wk", "wv"))
            if self.k[i] is not None:
                k = np.concatenate([self.k[i], k], axis=2)
                v = np.concatenate([self.v[i], v], axis=2)
            self.k[i], self.v[i] = k, v
            att = T.softmax((q @ np.swapaxes(k, -1, -2)) * scale + mask) @ v
            x = x + np.transpose(att, (0, 2, 1, 3)).reshape(B, n, -1) @ p[f"l{i}.wo"]
            h = T.layer_norm(x, self._gain(f"l{i}.ln2"), cfg.ln_eps)
            x = x + np.maximum(h @ p[f"l{i}.ff1"], 0) @ p[f"l{i}.ff2"]
        self.pos += n
        h = T.layer_norm(x, self._gain("ln_f"), cfg.ln_eps)
        return T.log_softmax(h @ p["head"])


def count_parameters(params: ParamDict) -> int:
    return int(sum(v.size for v in params.values()))
