import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frictionlab.grad_engine import (AdamState, MLPConfig, Tape, TransformerConfig, TransformerDecoder,
                                     adam_step, count_parameters, dumps, finite_diff_check, init_mlp,
                                     init_transformer, loads, mlp_policy_forward, stack_params,
                                     transformer_policy_forward, value_and_grad)
from frictionlab.grad_engine import tape as T
from frictionlab.grad_engine.models import embed_tokens, transformer_from_embeddings
from frictionlab.grad_engine.serialize import load, save


# ------------------------------------------------------------------------ tape


def test_sum_gives_ones():
    w = np.random.default_rng(0).normal(size=(3, 4))
    _, g = value_and_grad(lambda p: T.total(p["w"]), {"w": w})
    np.testing.assert_array_equal(g["w"], np.ones_like(w))


def test_half_square_norm_gives_w():
    w = np.random.default_rng(1).normal(size=(5,))
    _, g = value_and_grad(lambda p: T.mul(T.total(T.mul(p["w"], p["w"])), 0.5), {"w": w})
    np.testing.assert_allclose(g["w"], w, rtol=1e-15)


def test_backward_errors():
    tape = Tape()
    x = tape.watch({"x": np.ones(2)})["x"]
    with pytest.raises(RuntimeError):
        tape.backward(x)
    y = T.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)
    with pytest.raises(RuntimeError):
        Tape().backward(T.total(y))


def test_reused_input_accumulates():
    _, g = value_and_grad(lambda p: T.total(T.add(T.mul(p["x"], 3.0), T.exp(p["x"]))), {"x": np.array([0.0, 1.0])})
    np.testing.assert_allclose(g["x"], 3 + np.exp([0.0, 1.0]))


# ------------------------------------------------------------------------- MLP


def mlp_oracle(p, x):
    """Straight-line loops, no shared code with the tape."""
    out = []
    for row in x:
        h = [max(0.0, sum(row[i] * p["w1"][i, j] for i in range(len(row))) + p["b1"][j])
             for j in range(p["w1"].shape[1])]
        logits = [sum(h[j] * p["w2"][j, k] for j in range(len(h))) + p["b2"][k] for k in range(p["w2"].shape[1])]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        out.append([v - lse for v in logits])
    return np.array(out)


def test_mlp_zero_params_uniform():
    p = {k: np.zeros_like(v) for k, v in init_mlp(MLPConfig(), np.random.default_rng(0)).items()}
    lp = mlp_policy_forward(p, np.random.default_rng(1).uniform(size=(4, 784)))
    np.testing.assert_allclose(lp, np.log(0.1), rtol=1e-15)


def test_mlp_matches_oracle():
    rng = np.random.default_rng(2)
    p = init_mlp(MLPConfig(n_in=7, hidden=5, n_out=3), rng)
    p["b1"] = rng.normal(size=5) * 0.3
    p["b2"] = rng.normal(size=3) * 0.3
    x = rng.uniform(size=(2, 7))
    np.testing.assert_allclose(mlp_policy_forward(p, x), mlp_oracle(p, x), atol=1e-12)


def test_mlp_rows_normalized_and_shape_checked():
    rng = np.random.default_rng(3)
    p = init_mlp(MLPConfig(), rng)
    lp = mlp_policy_forward(p, rng.uniform(size=(16, 784)))
    np.testing.assert_allclose(np.exp(lp).sum(1), 1, atol=1e-6)
    assert count_parameters(p) == 784 * 100 + 100 + 100 * 10 + 10
    with pytest.raises(ValueError):
        mlp_policy_forward(p, np.zeros((2, 783)))


# ----------------------------------------------------------------- transformer


def _ln(v, g, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + eps) * gi for a, gi in zip(v, g)]


def _vm(v, W):
    return [sum(v[i] * W[i, j] for i in range(len(v))) for j in range(W.shape[1])]


def transformer_oracle(p, tokens):
    """One layer, one head, written position by position."""
    out = []
    for seq in tokens:
        x = [list(p["tok_emb"][t] + p["pos_emb"][i]) for i, t in enumerate(seq)]
        h = [_ln(v, p["l0.ln1"]) for v in x]
        q = [_vm(v, p["l0.wq"]) for v in h]
        k = [_vm(v, p["l0.wk"]) for v in h]
        vv = [_vm(v, p["l0.wv"]) for v in h]
        d = len(x[0])
        new = []
        for t in range(len(seq)):
            s = [sum(a * b for a, b in zip(q[t], k[u])) / math.sqrt(d) for u in range(t + 1)]
            m = max(s)
            w = [math.exp(a - m) for a in s]
            z = sum(w)
            att = [sum(w[u] / z * vv[u][c] for u in range(t + 1)) for c in range(d)]
            new.append([a + b for a, b in zip(x[t], _vm(att, p["l0.wo"]))])
        x = new
        rows = []
        for v in x:
            f = [max(0.0, a) for a in _vm(_ln(v, p["l0.ln2"]), p["l0.ff1"])]
            v = [a + b for a, b in zip(v, _vm(f, p["l0.ff2"]))]
            logits = _vm(_ln(v, p["ln_f"]), p["head"])
            m = max(logits)
            lse = m + math.log(sum(math.exp(a - m) for a in logits))
            rows.append([a - lse for a in logits])
        out.append(rows)
    return np.array(out)


def micro_cfg():
    return TransformerConfig(n_vocab_in=3, n_vocab_out=2, max_len=5, d_model=2, n_heads=1, n_layers=1, d_ff=3)


def test_transformer_matches_oracle():
    rng = np.random.default_rng(4)
    cfg = micro_cfg()
    p = init_transformer(cfg, rng)
    p = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in p.items()}
    tokens = rng.integers(0, 3, size=(2, 5))
    np.testing.assert_allclose(transformer_policy_forward(p, tokens, cfg), transformer_oracle(p, tokens), atol=1e-10)


def test_transformer_causal_outputs():
    cfg = TransformerConfig.for_reversal(2, 5)
    rng = np.random.default_rng(5)
    p = init_transformer(cfg, rng)
    tokens = rng.integers(0, 3, size=(3, cfg.max_len))
    base = transformer_policy_forward(p, tokens, cfg)
    np.testing.assert_allclose(np.exp(base).sum(-1), 1, atol=1e-5)
    for t in (0, 4, cfg.max_len - 1):
        other = tokens.copy()
        other[:, t] = (other[:, t] + 1) % 3
        changed = transformer_policy_forward(p, other, cfg)
        np.testing.assert_array_equal(changed[:, :t], base[:, :t])


def test_transformer_causal_gradient_exact_zero():
    cfg = TransformerConfig.for_reversal(2, 4)
    rng = np.random.default_rng(6)
    p = init_transformer(cfg, rng)
    tokens = rng.integers(0, 3, size=(2, cfg.max_len))
    t = 3
    tape = Tape()
    tracked = tape.watch(p)
    x = tape.watch({"x": T.data(embed_tokens(p, tokens))})["x"]
    lp = transformer_from_embeddings(tracked, x, cfg)
    tape.backward(T.total(T.mul(lp, (np.arange(cfg.max_len) == t)[None, :, None] * 1.0)))
    assert np.all(x.grad[:, t + 1:] == 0.0)
    assert np.any(x.grad[:, :t + 1] != 0.0)


def test_transformer_errors():
    cfg = micro_cfg()
    p = init_transformer(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        transformer_policy_forward(p, np.zeros((1, 6), int), cfg)
    with pytest.raises(ValueError):
        transformer_policy_forward(p, np.full((1, 3), 3), cfg)
    with pytest.raises(ValueError):
        init_transformer(TransformerConfig(d_model=10, n_heads=4), np.random.default_rng(0))


def test_reversal_model_size():
    n = count_parameters(init_transformer(TransformerConfig.for_reversal(2, 10), np.random.default_rng(0)))
    # 3 layers of d=64 with 4 attention and 2 feed-forward kernels of width 128
    assert n == 3 * 64 + 21 * 64 + 3 * (2 * 64 + 4 * 64 * 64 + 2 * 64 * 128) + 64 + 64 * 2


@pytest.mark.parametrize("stacked", [False, True])
def test_cached_decoder_matches_full_forward(stacked):
    cfg = TransformerConfig.for_reversal(2, 4)
    rng = np.random.default_rng(7)
    snaps = [init_transformer(cfg, rng) for _ in range(3)]
    tokens = rng.integers(0, 3, size=(4, cfg.max_len))
    index = np.array([0, 2, 1, 2])
    params = stack_params(snaps, index) if stacked else snaps[0]
    dec = TransformerDecoder(params, cfg, 4)
    got = np.concatenate([dec.step(tokens[:, :5]), dec.step(tokens[:, 5:7]), dec.step(tokens[:, 7:])], axis=1)
    if stacked:
        ref = np.stack([transformer_policy_forward(snaps[i], tokens[b:b + 1], cfg)[0] for b, i in enumerate(index)])
    else:
        ref = transformer_policy_forward(params, tokens, cfg)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    with pytest.raises(ValueError):
        dec.step(tokens[:, :1])


# ------------------------------------------------------------ finite differences


@pytest.mark.parametrize("seed", range(5))
def test_finite_differences(seed):
    assert finite_diff_check("mlp", seed) <= 1e-5
    assert finite_diff_check("transformer", seed) <= 1e-4


def test_finite_diff_deterministic():
    assert finite_diff_check("mlp", 3) == finite_diff_check("mlp", 3)


def test_float32_graph_stays_float32():
    cfg = micro_cfg()
    p = init_transformer(cfg, np.random.default_rng(0), np.float32)
    tokens = np.zeros((1, 5), int)
    _, g = value_and_grad(lambda q: T.total(transformer_policy_forward(q, tokens, cfg)), p)
    assert all(v.dtype == np.float32 for v in g.values())


# ------------------------------------------------------------------------ Adam


def test_adam_zero_grad_and_zero_lr():
    rng = np.random.default_rng(8)
    p = {"w": rng.normal(size=4)}
    w0 = p["w"].copy()
    s = AdamState(lr=1e-2)
    adam_step(s, p, {"w": np.zeros(4)})
    np.testing.assert_array_equal(p["w"], w0)
    s = AdamState(lr=0.0)
    adam_step(s, p, {"w": rng.normal(size=4)})
    np.testing.assert_array_equal(p["w"], w0)
    assert s.step == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    adam_step(AdamState(lr=0.1), p, {"w": np.array([3.0, -0.2, 1e-3])})
    np.testing.assert_allclose(p["w"], [0.9, 1.1, 0.9], atol=1e-5)


def test_adam_scalar_trace():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    w, m, v = 0.5, 0.0, 0.0
    p = {"w": np.array(0.5)}
    s = AdamState(lr=lr)
    for t, g in enumerate([0.3, -1.2, 0.05], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        adam_step(s, p, {"w": np.array(g)})
        assert abs(float(p["w"]) - w) <= 1e-12


def test_adam_errors():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(AdamState(), p, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(ValueError):
        adam_step(AdamState(), p, {"w": np.zeros(3)})


# ----------------------------------------------------------------- serialization


def test_serialize_round_trip(tmp_path):
    p = init_transformer(micro_cfg(), np.random.default_rng(9))
    q = loads(dumps(p))
    assert list(q) == list(p)
    for k in p:
        np.testing.assert_array_equal(q[k], p[k])
    save(p, tmp_path / "snap.bin")
    assert dumps(load(tmp_path / "snap.bin")) == dumps(p)


def test_serialize_layout():
    blob = dumps({"ab": np.array([[1.0, 2.0]])})
    assert blob[:8] == (1).to_bytes(8, "little")
    assert blob[8:16] == (2).to_bytes(8, "little") and blob[16:18] == b"ab"
    assert blob[18:26] == (2).to_bytes(8, "little")
    assert len(blob) == 8 + 8 + 2 + 8 + 16 + 16


def test_serialize_errors():
    blob = dumps({"w": np.ones(3)})
    with pytest.raises(ValueError):
        loads(blob[:-1])
    with pytest.raises(ValueError):
        loads(blob + b"\0")


@settings(max_examples=30)
@given(st.lists(st.floats(allow_nan=False), min_size=1, max_size=20))
def test_serialize_property(values):
    arr = np.array(values)
    np.testing.assert_array_equal(loads(dumps({"x": arr}))["x"], arr)
