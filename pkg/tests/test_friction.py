import math

import numpy as np
import pytest

from frictionlab.envs import Episode, ReversalSpec, generate, response_logp, sample_prompt
from frictionlab.friction import (CURRENT, CheckpointBuffer, FrictionConfig, apply_frictions,
                                  corrupt_reward, inject_bug, inject_oracle, push_checkpoint, sample_actor)
from frictionlab.grad_engine import TransformerConfig, init_transformer


def within_3_sigma(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def tiny(spec):
    return TransformerConfig.for_reversal(spec.M, spec.H, d_model=4, n_heads=1, n_layers=1, d_ff=4)


def snap(value):
    return {"w": np.full(2, float(value))}


# ---------------------------------------------------------------------- buffer


def test_ring_semantics():
    buf = CheckpointBuffer(3)
    for i in range(1, 6):
        assert buf.push(snap(i)) == i
    assert buf.stored_versions().tolist() == [3, 4, 5]
    assert buf.get(4)["w"][0] == 4.0
    with pytest.raises(KeyError):
        buf.get(2)
    g = buf.gather(np.array([5, 3, 3]))
    assert g["w"][:, 0].tolist() == [5.0, 3.0, 3.0]


def test_capacity_zero_is_on_policy():
    buf = push_checkpoint(CheckpointBuffer(0), snap(1))
    assert len(buf) == 0
    params, v = sample_actor(buf, snap(9), np.random.default_rng(0))
    assert v == CURRENT and params["w"][0] == 9.0


def test_single_element_buffer():
    buf = CheckpointBuffer(4)
    buf.push(snap(7))
    params, v = sample_actor(buf, snap(0), np.random.default_rng(0))
    assert v == 1 and params["w"][0] == 7.0


def test_uniform_version_sampling():
    D, n = 30, 100_000
    buf = CheckpointBuffer(D)
    for i in range(45):
        buf.push(snap(i))
    v = buf.sample_versions(np.random.default_rng(1), n)
    counts = np.bincount(v - 16, minlength=D)
    assert counts.size == D
    assert all(within_3_sigma(c, n, 1 / D) for c in counts)


def test_fixed_lag_uses_oldest():
    buf = CheckpointBuffer(3, fixed_lag=True)
    for i in range(5):
        buf.push(snap(i))
    assert set(buf.sample_versions(np.random.default_rng(0), 10)) == {3}


def test_buffer_persistence_round_trip():
    buf = CheckpointBuffer(3)
    for i in range(5):
        buf.push(snap(i))
    back = CheckpointBuffer.loads(buf.dumps())
    assert back.stored_versions().tolist() == buf.stored_versions().tolist()
    assert back.pushed == buf.pushed
    for v in buf.stored_versions():
        np.testing.assert_array_equal(back.get(int(v))["w"], buf.get(int(v))["w"])
    assert back.dumps() == buf.dumps()


def test_config_validation():
    for bad in (dict(D=-1), dict(D=1.5), dict(p_E=1.2), dict(p_R=-0.1), dict(kappa=3)):
        with pytest.raises(ValueError):
            FrictionConfig(**bad)
    c = FrictionConfig.combined()
    assert (c.D, c.p_E, c.p_R, c.p_C, c.kappa) == (30, 3e-3, 0.01, 1e-3, -1.0)


# --------------------------------------------------------------- single episodes


def _episode(prompt):
    prompt = np.asarray(prompt)
    return Episode(prompt, prompt.copy(), np.full(prompt.size, -0.5), 0.2, 0.2, 0.2)


def test_inject_bug():
    spec = ReversalSpec(M=2, H=4)
    ep = _episode([1, 0, 1, 1])
    assert inject_bug(ep, 0.0, np.random.default_rng(0), spec) is ep
    bugged = inject_bug(ep, 1.0, np.random.default_rng(0), spec)
    assert bugged.bug_injected and np.all(bugged.response == 0) and np.all(bugged.behavior_logp == 0)
    assert inject_bug(_episode([0, 0, 0, 0]), 1.0, np.random.default_rng(0), spec).correctness == 1.0


def test_corrupt_reward():
    rng = np.random.default_rng(2)
    assert corrupt_reward(0.3, 0.0, rng) == (0.3, False)
    n = 100_000
    out = [corrupt_reward(0.3, 1.0, rng) for _ in range(n)]
    assert all(flag for _, flag in out)
    assert within_3_sigma(sum(r for r, _ in out), n, 0.5)


def test_inject_oracle():
    spec = ReversalSpec(M=2, H=3, kappa=-1.0)
    rng = np.random.default_rng(3)
    assert inject_oracle(np.array([0, 1, 1]), 0.0, rng, spec) is None
    ep = inject_oracle(np.array([0, 1, 1]), 1.0, rng, spec)
    assert ep.oracle_injected and ep.response.tolist() == [1, 1, 0] and ep.reward == 1.0
    n = 1_000_000
    hits_fn = sum(inject_oracle(np.zeros(3, int), 1e-3, rng, spec) is not None for _ in range(n))
    assert within_3_sigma(hits_fn, n, 1e-3)


# ----------------------------------------------------------------------- batches


def test_zero_config_matches_direct_rollouts():
    spec = ReversalSpec(M=2, H=5)
    cfg = tiny(spec)
    params = init_transformer(cfg, np.random.default_rng(0))
    prompts = sample_prompt(spec, np.random.default_rng(1), 32)
    batch = apply_frictions(prompts, params, CheckpointBuffer(0), FrictionConfig(), np.random.default_rng(7),
                            spec, model_cfg=cfg)
    resp, lp = generate(params, spec, prompts, np.random.default_rng(7), "sample", cfg)
    np.testing.assert_array_equal(batch.responses, resp)
    np.testing.assert_array_equal(batch.behavior_logp, lp)
    assert not (batch.bug_injected.any() or batch.oracle_injected.any() or batch.reward_corrupted.any())
    assert np.all(batch.actor_version == CURRENT)


def test_stale_behavior_logp_matches_actor():
    spec = ReversalSpec(M=2, H=5)
    cfg = tiny(spec)
    rng = np.random.default_rng(0)
    buf = CheckpointBuffer(4)
    snaps = {}
    for _ in range(6):
        p = init_transformer(cfg, rng)
        snaps[buf.push(p)] = p
    learner = init_transformer(cfg, rng)
    prompts = sample_prompt(spec, rng, 40)
    batch = apply_frictions(prompts, learner, buf, FrictionConfig(D=4), np.random.default_rng(5), spec, model_cfg=cfg)
    assert set(batch.actor_version) <= {3, 4, 5, 6}
    for i in range(len(batch)):
        ref = response_logp(snaps[int(batch.actor_version[i])], spec, prompts[i:i + 1], batch.responses[i:i + 1], cfg)
        np.testing.assert_allclose(batch.behavior_logp[i], ref[0], atol=1e-6)


def test_bug_wins_over_oracle():
    spec = ReversalSpec(M=2, H=4, kappa=-1.0)
    cfg = tiny(spec)
    params = init_transformer(cfg, np.random.default_rng(0))
    prompts = np.array([[1, 1, 0, 1]] * 8)
    batch = apply_frictions(prompts, params, CheckpointBuffer(0), FrictionConfig(p_E=1.0, p_C=1.0, kappa=-1.0),
                            np.random.default_rng(1), spec, model_cfg=cfg)
    assert batch.bug_injected.all() and batch.oracle_injected.all()
    assert np.all(batch.responses == 0) and np.all(batch.correctness == 0.0)


def test_rates_and_operating_point():
    spec = ReversalSpec(M=2, H=5, kappa=-1.0)
    cfg = tiny(spec)
    rng = np.random.default_rng(11)
    fc = FrictionConfig.combined()
    buf = CheckpointBuffer(fc.D)
    for _ in range(fc.D):
        buf.push(init_transformer(cfg, rng))
    counts = dict(bug=0, oracle=0, corrupt=0)
    versions = set()
    n, chunk = 100_000, 10_000
    for _ in range(n // chunk):
        b = apply_frictions(sample_prompt(spec, rng, chunk), None, buf, fc, rng, spec, model_cfg=cfg)
        counts["bug"] += int(b.bug_injected.sum())
        counts["oracle"] += int(b.oracle_injected.sum())
        counts["corrupt"] += int(b.reward_corrupted.sum())
        versions |= set(b.actor_version.tolist())
        clean = ~b.reward_corrupted
        np.testing.assert_array_equal(b.reward[clean], b.raw_reward[clean])
        assert set(np.unique(b.reward[b.reward_corrupted])) <= {0.0, 1.0}
        assert np.all(b.raw_reward[b.oracle_injected & ~b.bug_injected] == 1.0)
    assert within_3_sigma(counts["bug"], n, fc.p_E)
    assert within_3_sigma(counts["oracle"], n, fc.p_C)
    assert within_3_sigma(counts["corrupt"], n, fc.p_R)
    assert versions == set(range(1, fc.D + 1))
