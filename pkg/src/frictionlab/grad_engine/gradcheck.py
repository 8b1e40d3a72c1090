"""Central finite differences against the tape, on micro-sized models."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tape as T
from .models import (MLPConfig, TransformerConfig, init_mlp, init_transformer,
                     mlp_policy_forward, transformer_policy_forward)


def value_and_grad(loss_fn: Callable, params: dict[str, np.ndarray]):
    """Evaluate ``loss_fn`` on a fresh tape; returns (loss, grads by name)."""
    tape = T.Tape()
    tracked = tape.watch(params)
    loss = loss_fn(tracked)
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tracked.items()}
    return float(loss.data), grads


def numeric_grad(loss_fn: Callable, params: dict[str, np.ndarray], h: float = 1e-5):
    grads = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params))
            flat[i] = orig - h
            down = float(loss_fn(params))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[k] = g
    return grads


def max_relative_error(a: dict, b: dict, floor: float = 1e-12) -> float:
    """Worst per-parameter relative error ``|a - b| / max(|a|, |b|)`` in the 2-norm.

    Entrywise ratios are dominated by finite-difference round-off on
    entries near zero, so each parameter tensor is compared as a whole.
    """
    worst = 0.0
    for k in a:
        scale = max(np.linalg.norm(a[k]), np.linalg.norm(b[k]), floor)
        worst = max(worst, float(np.linalg.norm(a[k] - b[k]) / scale))
    return worst


def micro_problem(model: str, seed: int):
    """Random micro-scale params and a random coefficient-weighted log-prob loss."""
    rng = np.random.default_rng(seed)
    if model == "mlp":
        cfg = MLPConfig(n_in=6, hidden=5, n_out=4)
        params = init_mlp(cfg, rng)
        params["b1"] = rng.normal(scale=0.1, size=params["b1"].shape)
        x = rng.uniform(0, 1, size=(3, cfg.n_in))
        coef = rng.normal(size=(3, cfg.n_out))

        def loss_fn(p):
            return T.total(T.mul(mlp_policy_forward(p, x), coef))
    elif model == "transformer":
        cfg = TransformerConfig(n_vocab_in=3, n_vocab_out=2, max_len=5, d_model=8, n_heads=2,
                                n_layers=2, d_ff=8)
        params = init_transformer(cfg, rng)
        for k in params:
            if ".ln" in k or k == "ln_f":
                params[k] = params[k] + rng.normal(scale=0.1, size=params[k].shape)
            if "emb" in k:
                params[k] = rng.normal(scale=0.5, size=params[k].shape)
        tokens = rng.integers(0, cfg.n_vocab_in, size=(2, cfg.max_len))
        coef = rng.normal(size=(2, cfg.max_len, cfg.n_vocab_out))

        def loss_fn(p):
            return T.total(T.mul(transformer_policy_forward(p, tokens, cfg), coef))
    else:
        raise ValueError(f"unknown model {model!r}")
    return params, loss_fn


def finite_diff_check(model: str, seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences."""
    params, loss_fn = micro_problem(model, seed)
    _, analytic = value_and_grad(loss_fn, params)
    numeric = numeric_grad(loss_fn, params, h)
    return max_relative_error(analytic, numeric)
