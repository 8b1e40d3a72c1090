import io
import math
import tarfile

import numpy as np
import pytest

from frictionlab import fetch
from frictionlab.cli import main
from frictionlab.envs import MNIST_FILES, IdxMagicError
from frictionlab.experiments import (ConfigError, ExperimentConfig, config_text, exact_target_gradients,
                                     misalignment, parse_config_text, run_experiment)
from frictionlab.grad_engine import MLPConfig, init_mlp, mlp_policy_forward
from frictionlab.grad_engine.gradcheck import numeric_grad
from frictionlab.records import MetricRecord, emit_records, read_records
from frictionlab.search import SweepSpec, hstar_search, sweep, with_param

MNIST_DIR = fetch.default_cache_dir()
have_mnist = pytest.mark.skipif(not (MNIST_DIR / MNIST_FILES[("train", "images")]).exists(),
                                reason="MNIST not cached; run `frictionlab fetch-data`")


def small_bandit(**kw):
    return ExperimentConfig(kind="bandit", arms=10, steps=30, eval_every=5, **kw)


# ---------------------------------------------------------------------- config


def test_config_parse_round_trip():
    cfg = parse_config_text("kind = mnist\nestimator = dg:eta=2  # comment\nD: 1000\nseeds = 0 1 2\nfixed_lag = yes\n")
    assert (cfg.kind, cfg.estimator, cfg.D, cfg.seeds, cfg.fixed_lag) == ("mnist", "dg:eta=2", 1000, (0, 1, 2), True)
    assert parse_config_text(config_text(cfg)) == cfg
    r = cfg.resolved()
    assert r.lr == 1e-3 and r.steps == 10_000 and r.baseline == "expected"


@pytest.mark.parametrize("text", ["nope = 1", "D = abc", "fixed_lag = maybe"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("kw", [dict(kind="x"), dict(estimator="sgd"), dict(D=-1), dict(p_E=2.0),
                                dict(kind="mnist", estimator="ppo"), dict(kind="mnist", p_E=0.1),
                                dict(baseline="grouped:5"), dict(steps=-1), dict(seeds=())])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw).resolved()


# --------------------------------------------------------------------- records


def test_records_ordering_and_round_trip(tmp_path):
    rows = [MetricRecord("r", s, 0, "dg", m, float(s) + 0.125) for s in (1, 0) for m in ("b", "a")]
    path = emit_records(rows, tmp_path / "x.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "run_id,seed,step,method,metric,value"
    assert [line.split(",")[1] + line.split(",")[4] for line in lines[1:]] == ["0a", "0b", "1a", "1b"]
    assert sorted(read_records(path), key=MetricRecord.sort_key) == sorted(rows, key=MetricRecord.sort_key)
    empty = emit_records([], tmp_path / "e.csv")
    assert empty.read_text() == "run_id,seed,step,method,metric,value\n"


def test_records_nan_and_append(tmp_path):
    p = tmp_path / "n.csv"
    emit_records([MetricRecord("r", 0, 0, "m", "x", math.nan)], p)
    emit_records([MetricRecord("r", 0, 1, "m", "x", 1.0)], p, append=True)
    back = read_records(p)
    assert math.isnan(back[0].value) and back[1].value == 1.0 and len(back) == 2


def test_csv_determinism(tmp_path):
    for name in ("a", "b"):
        emit_records(run_experiment(small_bandit(seeds=(3, 4))), tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_cli_runs_and_is_deterministic(tmp_path, capsys):
    args = ["bandit", "--set", "arms=10", "--set", "steps=20", "--seed", "0-1"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert {r.seed for r in read_records(tmp_path / "a.csv")} == {0, 1}
    assert main(["bandit", "--set", "bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_cli_theory_suite(tmp_path, capsys):
    assert main(["theory", "--out", str(tmp_path / "t.csv")]) == 0
    err = capsys.readouterr().err
    assert "lemma1" in err.lower()
    assert read_records(tmp_path / "t.csv")


# ----------------------------------------------------------------- misalignment


def test_misalignment_examples():
    g = np.array([1.0, -2.0, 0.5])
    assert misalignment(g, g) == pytest.approx(0.0, abs=1e-15)
    assert misalignment(g, -g) == pytest.approx(2.0)
    assert misalignment(3.7 * g, g) == pytest.approx(0.0, abs=1e-15)
    assert math.isnan(misalignment(np.zeros(3), g))


def test_target_gradient_ce_matches_finite_difference():
    rng = np.random.default_rng(0)
    p = init_mlp(MLPConfig(n_in=6, hidden=5, n_out=10), rng)
    x = rng.uniform(size=(4, 6))
    y = rng.integers(0, 10, size=4)
    _, g_ce = exact_target_gradients(p, x, y)
    num = numeric_grad(lambda q: np.mean(np.asarray(mlp_policy_forward(q, x))[np.arange(4), y]), p)
    for k in p:
        np.testing.assert_allclose(g_ce[k], num[k], rtol=1e-6, atol=1e-9)


def test_target_gradient_pg_by_enumeration():
    rng = np.random.default_rng(1)
    p = init_mlp(MLPConfig(n_in=6, hidden=5, n_out=10), rng)
    x = rng.uniform(size=(2, 6))
    y = np.array([3, 8])
    g_pg, _ = exact_target_gradients(p, x, y)

    def expected_reward(q):
        return np.mean(np.exp(np.asarray(mlp_policy_forward(q, x)))[np.arange(2), y])

    num = numeric_grad(expected_reward, p)
    for k in p:
        np.testing.assert_allclose(g_pg[k], num[k], rtol=1e-6, atol=1e-10)


def flat(g):
    return np.concatenate([v.ravel() for v in g.values()])


def test_target_gradients_limits():
    p = {k: np.zeros_like(v) for k, v in init_mlp(MLPConfig(n_in=4, hidden=3), np.random.default_rng(0)).items()}
    x = np.random.default_rng(1).uniform(size=(1, 4))
    g_pg, g_ce = exact_target_gradients(p, x, np.array([2]))
    assert misalignment(flat(g_pg), flat(g_ce)) < 1.0  # cosine > 0 under the uniform policy
    p["b2"][2] = 100.0  # deterministic and correct
    g_pg, _ = exact_target_gradients(p, x, np.array([2]))
    assert np.linalg.norm(flat(g_pg)) < 1e-30


# ----------------------------------------------------------------------- search


def test_single_point_sweep():
    res = sweep(SweepSpec(small_bandit(estimator="dg:eta=1"), "eta", (0.5,), (0,), (1,)))
    assert res.best == 0.5 and len(res.table) == 1 and math.isfinite(res.eval_mean)
    with pytest.raises(ValueError):
        with_param(small_bandit(estimator="reinforce"), "eta", 1.0)
    with pytest.raises(ValueError):
        sweep(SweepSpec(small_bandit(), "lr", ()))


def test_hstar_zero_budget_and_trivial_horizon():
    base = ExperimentConfig(kind="reversal", estimator="reinforce")
    assert hstar_search(base, [1, 2], 0, (0,)).per_seed == {0: 0}
    res = hstar_search(base, [1], 100, (0,))
    assert res.per_seed[0] >= 1 and res.probes[(0, 1)]
    with pytest.raises(ValueError):
        hstar_search(base, [2, 1], 100)


# ------------------------------------------------------------------------ fetch


def _link_cache(tmp_path):
    for name in MNIST_FILES.values():
        (tmp_path / name).symlink_to(MNIST_DIR / name)


@have_mnist
def test_fetch_cache_hit_makes_no_request(tmp_path, monkeypatch):
    _link_cache(tmp_path)

    def no_network(*a, **k):
        raise AssertionError("network touched")

    monkeypatch.setattr(fetch, "_http_get", no_network)
    assert fetch.fetch_mnist(tmp_path) == tmp_path


@have_mnist
def test_fetch_quarantines_corrupt_file_and_refetches(tmp_path, monkeypatch):
    _link_cache(tmp_path)
    name = MNIST_FILES[("test", "labels")]
    good = (MNIST_DIR / name).read_bytes()
    (tmp_path / name).unlink()
    (tmp_path / name).write_bytes(b"\0\0\0\0" + good[4:])
    with pytest.raises(IdxMagicError):
        fetch.fetch_mnist(tmp_path, offline=True)
    assert (tmp_path / (name + ".corrupt")).exists() and not (tmp_path / name).exists()
    with pytest.raises(fetch.FetchError):
        fetch.fetch_mnist(tmp_path, offline=True)

    tgz = io.BytesIO()
    with tarfile.open(fileobj=tgz, mode="w:gz") as tar:
        info = tarfile.TarInfo(f"package/data/{name}")
        info.size = len(good)
        tar.addfile(info, io.BytesIO(good))
    monkeypatch.setattr(fetch, "_http_get", lambda url, timeout: tgz.getvalue())
    fetch.fetch_mnist(tmp_path, mirror="https://example.invalid/mnist.tgz")
    assert (tmp_path / name).read_bytes() == good


# ------------------------------------------------------------------------ MNIST


@have_mnist
def test_mnist_short_run_records():
    cfg = ExperimentConfig(kind="mnist", estimator="is_pg", D=5, steps=4, eval_every=2, seeds=(0,))
    rows = run_experiment(cfg)
    metrics = {r.metric for r in rows}
    assert {"test_error", "misalign_pg", "misalign_ce", "train_reward"} <= metrics
    assert [r.step for r in rows if r.metric == "test_error"] == [0, 2, 4]
    assert rows == run_experiment(cfg)
