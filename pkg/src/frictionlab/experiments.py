"""Experiment configs and the training loops behind every CLI subcommand."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bandit_theory as bt
from .envs import (ReversalSpec, eval_prompts, load_mnist, mnist_reward, response_logp,
                   sample_prompt, sequence_error)
from .estimators import (BaselineKind, EstimatorKind, grouped_advantages_batch, mnist_advantage,
                         surrogate_loss)
from .fetch import default_cache_dir
from .friction import CURRENT, CheckpointBuffer, FrictionConfig, apply_frictions
from .grad_engine import tape as T
from .grad_engine.adam import AdamState, adam_step
from .grad_engine.models import MLPConfig, init_mlp, init_transformer, mlp_policy_forward
from .records import MetricRecord

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("theory", "bandit", "mnist", "reversal")

# per-kind defaults for fields left as None
_DEFAULTS = {
    "reversal": dict(baseline="grouped:10", lr=1e-4, steps=1000, eval_every=50, dtype="float32"),
    "mnist": dict(baseline="expected", lr=1e-3, steps=10_000, eval_every=500, dtype="float64"),
    "bandit": dict(baseline="zero", lr=0.1, steps=2000, eval_every=10, dtype="float64"),
    "theory": dict(baseline="zero", lr=0.0, steps=0, eval_every=1, dtype="float64"),
}


class ConfigError(ValueError):
    pass


class DatasetMissingError(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    kind: str = "reversal"
    estimator: str = "dg:eta=1"
    baseline: str | None = None
    # frictions
    D: int = 0
    p_E: float = 0.0
    p_R: float = 0.0
    p_C: float = 0.0
    kappa: float = 1.0
    fixed_lag: bool = False
    # reversal task
    M: int = 2
    H: int = 10
    n_prompts: int = 10
    group_size: int = 10
    eval_size: int = 256
    # mnist / bandit batch
    batch_size: int = 100
    # bandit
    arms: int = 100
    rho: float = 0.1
    # optimizer and schedule (lr is the normalized step size for the bandit)
    lr: float | None = None
    steps: int | None = None
    eval_every: int | None = None
    dtype: str | None = None
    # bookkeeping
    seeds: tuple[int, ...] = (0,)
    out: str = ""
    run_id: str = ""
    data_dir: str = ""
    misalignment: bool = True
    stop_on_success: bool = False  # reversal: end a run at its first raw perfect episode

    def resolved(self) -> "ExperimentConfig":
        """Copy with per-kind defaults filled in; validates every field."""
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        fill = {k: v for k, v in _DEFAULTS[self.kind].items() if getattr(self, k) is None}
        cfg = dataclasses.replace(self, **fill)
        cfg.seeds = tuple(int(s) for s in cfg.seeds)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            EstimatorKind.parse(self.estimator)
            BaselineKind.parse(self.baseline)
            self.friction()
            if self.kind == "reversal":
                self.spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        est = EstimatorKind.parse(self.estimator)
        if self.kind == "reversal":
            if BaselineKind.parse(self.baseline).name != "grouped":
                raise ConfigError("reversal runs use the grouped baseline")
            if BaselineKind.parse(self.baseline).group_size != self.group_size:
                raise ConfigError("grouped baseline size must equal group_size")
        if self.kind == "mnist":
            if BaselineKind.parse(self.baseline).name == "grouped":
                raise ConfigError("the grouped baseline is not defined for MNIST")
            if est.name in ("ppo", "pmpo"):
                raise ConfigError("MNIST runs support reinforce, is_pg and dg")
            if self.p_E or self.p_R or self.p_C:
                raise ConfigError("MNIST runs only model staleness (D)")
        if self.kind == "bandit" and est.name not in ("reinforce", "is_pg", "dg"):
            raise ConfigError("bandit runs support reinforce (pg), is_pg (exact IS) and dg")

    def friction(self) -> FrictionConfig:
        return FrictionConfig(self.D, self.p_E, self.p_R, self.p_C, self.kappa, self.fixed_lag)

    def spec(self) -> ReversalSpec:
        return ReversalSpec(self.M, self.H, self.kappa)

    def method_label(self) -> str:
        return str(EstimatorKind.parse(self.estimator))

    def default_run_id(self) -> str:
        return self.run_id or f"{self.kind}-{self.method_label()}"


# ------------------------------------------------------------------ config files


def _coerce(value: str, typ):
    typ = str(typ)
    value = value.strip()
    if "tuple" in typ:
        return tuple(int(v) for v in value.replace(",", " ").split())
    if "bool" in typ:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if value.lower() in ("none", "") and "None" in typ:
        return None
    if typ.startswith("int"):
        return int(value)
    if "float" in typ:
        return float(value)
    return value


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """``key = value`` lines (``#`` comments); keys are ExperimentConfig field names."""
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(":")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            updates[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return dataclasses.replace(base or ExperimentConfig(), **updates)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def config_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------------- helpers


def _seed_rngs(seed: int, kind: str):
    """Independent generator streams for init, training draws and evaluation."""
    tag = EXPERIMENT_KINDS.index(kind)
    root = np.random.SeedSequence([seed, tag])
    init, train, evals = root.spawn(3)
    return np.random.default_rng(init), np.random.default_rng(train), np.random.default_rng(evals)


def _flat(grads: dict[str, np.ndarray], keys) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k], dtype=np.float64).ravel() for k in keys])


def misalignment(g, g_star) -> float:
    """``1 - cos(g, g*)``; NaN (a missing value) when either vector is zero."""
    g = np.asarray(g, dtype=np.float64).ravel()
    g_star = np.asarray(g_star, dtype=np.float64).ravel()
    ng, ns = np.linalg.norm(g), np.linalg.norm(g_star)
    if ng == 0 or ns == 0:
        return float("nan")
    return float(1.0 - np.clip(g @ g_star / (ng * ns), -1.0, 1.0))


def _grad(loss_fn, params):
    tape = T.Tape()
    tracked = tape.watch(params)
    loss = loss_fn(tracked)
    tape.backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tracked.items()}


# --------------------------------------------------------------------------- MNIST


def exact_target_gradients(params, images: np.ndarray, labels: np.ndarray):
    """Ascent directions (g*_PG, g*_CE) by enumerating all 10 labels per image.

    g*_PG uses the expected-reward baseline pi(y|x); g*_CE is the gradient of
    the mean log-likelihood of the true labels.
    """
    if len(images) == 0:
        raise ValueError("batch is empty")
    logp = mlp_policy_forward(params, images)
    p = np.exp(logp)
    B = len(labels)
    rows = np.arange(B)
    r = np.zeros_like(p)
    r[rows, labels] = 1.0
    weight = p * (r - p[rows, labels][:, None])  # pi(a|x) (r(a) - b(x)), held constant

    g_pg = _grad(lambda t: T.mul(T.total(T.mul(mlp_policy_forward(t, images), weight)), 1.0 / B), params)
    g_ce = _grad(lambda t: T.mul(T.total(T.take_last(mlp_policy_forward(t, images), labels)), 1.0 / B),
                 params)
    return g_pg, g_ce


def behavior_log_probs(buffer: CheckpointBuffer, versions: np.ndarray, learner, x: np.ndarray) -> np.ndarray:
    """Log-policy rows of each sample's own actor (grouped by version)."""
    out = np.empty((len(x), 10))
    for v in np.unique(versions):
        idx = np.flatnonzero(versions == v)
        params = learner if v == CURRENT else buffer.get(int(v))
        out[idx] = mlp_policy_forward(params, x[idx])
    return out


def _sample_actions(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(logp), axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(len(logp))
    return np.minimum((u[:, None] > cdf).sum(axis=1), logp.shape[1] - 1)


def _mnist_error(params, data, chunk: int = 2000) -> float:
    wrong = 0
    for s in range(0, len(data), chunk):
        x = data.pixels(slice(s, s + chunk))
        pred = np.argmax(mlp_policy_forward(params, x), axis=1)
        wrong += int(np.sum(pred != data.labels[s:s + chunk]))
    return wrong / len(data)


def _mnist_data(cfg: ExperimentConfig):
    data_dir = Path(cfg.data_dir) if cfg.data_dir else default_cache_dir()
    try:
        return load_mnist(data_dir, "train"), load_mnist(data_dir, "test")
    except FileNotFoundError as exc:
        raise DatasetMissingError(str(exc)) from exc


def run_mnist(cfg: ExperimentConfig, seed: int, data=None) -> list[MetricRecord]:
    """Contextual-bandit MNIST under actor staleness (greedy test error every eval)."""
    train, test = data or _mnist_data(cfg)
    est = EstimatorKind.parse(cfg.estimator)
    base = BaselineKind.parse(cfg.baseline)
    init_rng, rng, _ = _seed_rngs(seed, "mnist")
    params = init_mlp(MLPConfig(), init_rng)
    keys = list(params)
    adam = AdamState(lr=cfg.lr)
    buffer = CheckpointBuffer(cfg.D, cfg.fixed_lag)
    if cfg.D > 0:
        buffer.push(params)
    run_id, method = cfg.default_run_id(), cfg.method_label()
    rec = []

    def emit(step, metric, value):
        rec.append(MetricRecord(run_id, seed, step, method, metric, float(value)))

    for step in range(cfg.steps + 1):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            emit(step, "test_error", _mnist_error(params, test))
        if step == cfg.steps:
            break
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        x, y = train.pixels(idx), train.labels[idx].astype(np.int64)
        versions = buffer.sample_versions(rng, len(x)) if cfg.D > 0 else np.full(len(x), CURRENT)
        blogp_rows = behavior_log_probs(buffer, versions, params, x)
        actions = _sample_actions(blogp_rows, rng)
        r = mnist_reward(actions, y)
        blogp = blogp_rows[np.arange(len(x)), actions]

        tape = T.Tape()
        tracked = tape.watch(params)
        logp_rows = mlp_policy_forward(tracked, x)
        lp = T.take_last(logp_rows, actions)
        adv = mnist_advantage(r, np.exp(T.data(logp_rows)), y, base)
        loss = surrogate_loss(lp, adv, est, behavior_logp=blogp if est.needs_behavior else None)
        tape.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tracked.items()}

        if cfg.misalignment and (step + 1) % cfg.eval_every == 0:
            g = -_flat(grads, keys)  # ascent direction actually applied
            g_pg, g_ce = exact_target_gradients(params, x, y)
            emit(step + 1, "misalign_pg", misalignment(g, _flat(g_pg, keys)))
            emit(step + 1, "misalign_ce", misalignment(g, _flat(g_ce, keys)))
        if step % 100 == 0:
            emit(step, "train_reward", r.mean())
        adam_step(adam, params, grads)
        if cfg.D > 0:
            buffer.push(params)
    return rec


# ------------------------------------------------------------------------ reversal


def run_reversal(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    """Token reversal with grouped baseline under the configured frictions."""
    spec = cfg.spec()
    fric = cfg.friction()
    est = EstimatorKind.parse(cfg.estimator)
    dtype = np.dtype(cfg.dtype)
    mcfg = spec.model_config()
    init_rng, rng, _ = _seed_rngs(seed, "reversal")
    params = init_transformer(mcfg, init_rng, dtype)
    adam = AdamState(lr=cfg.lr)
    buffer = CheckpointBuffer(fric.D, fric.fixed_lag)
    if fric.D > 0:
        buffer.push(params)
    evals = eval_prompts(spec, seed, cfg.eval_size)
    run_id, method = cfg.default_run_id(), cfg.method_label()
    rec = []
    episodes = 0
    first_success = -1

    def emit(step, metric, value):
        rec.append(MetricRecord(run_id, seed, step, method, metric, float(value)))

    group = np.repeat(np.arange(cfg.n_prompts), cfg.group_size)
    for step in range(cfg.steps + 1):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            emit(step, "sequence_error", sequence_error(params, spec, evals, mcfg))
        if step == cfg.steps:
            break
        prompts = np.repeat(sample_prompt(spec, rng, cfg.n_prompts), cfg.group_size, axis=0)
        batch = apply_frictions(prompts, params, buffer, fric, rng, spec, group, mcfg)
        adv = grouped_advantages_batch(batch.reward, group)

        raw_success = (batch.correctness == 1.0) & ~batch.bug_injected & ~batch.oracle_injected
        if first_success < 0 and raw_success.any():
            first_success = episodes + int(np.flatnonzero(raw_success)[0]) + 1
        episodes += len(batch)
        emit(step, "train_successes", raw_success.sum())
        emit(step, "mean_reward", batch.reward.mean())

        tape = T.Tape()
        tracked = tape.watch(params)
        lp = response_logp(tracked, spec, batch.prompts, batch.responses, mcfg)
        loss = surrogate_loss(lp, adv, est, behavior_logp=batch.behavior_logp if est.needs_behavior else None)
        tape.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tracked.items()}
        adam_step(adam, params, grads)
        if fric.D > 0:
            buffer.push(params)
        if cfg.stop_on_success and first_success > 0:
            break
    emit(step, "episodes", episodes)
    emit(step, "first_success_episode", first_success)
    return rec


# -------------------------------------------------------------------------- bandit


def bandit_estimator(text: str) -> bt.BanditEstimator:
    est = EstimatorKind.parse(text)
    if est.name == "dg":
        return bt.BanditEstimator.dg(est.eta)
    if est.name == "reinforce":
        return bt.BanditEstimator.pg()
    if est.name == "is_pg":
        return bt.BanditEstimator.exact_is()
    raise ConfigError(f"bandit runs do not support {text!r}")


def run_bandit(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    bcfg = bt.BanditConfig(K=cfg.arms, rho=cfg.rho, B=cfg.batch_size, alpha=cfg.lr, steps=cfg.steps,
                           seed=seed, estimator=bandit_estimator(cfg.estimator))
    trace = bt.run_contaminated_bandit(bcfg)
    rows = trace.to_records(cfg.default_run_id(), every=cfg.eval_every)
    last = cfg.steps - 1
    if last % cfg.eval_every:
        rows += [r for r in trace.to_records(cfg.default_run_id()) if r.step == last]
    return [dataclasses.replace(r, method=cfg.method_label()) for r in rows]


def run_theory(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    results = bt.theory_property_suite(K=cfg.arms, rho=cfg.rho, eta=EstimatorKind.parse(cfg.estimator).eta
                                       if cfg.estimator.startswith("dg") else 1.0, seed=seed)
    for r in results:
        log.info(r.line())
    return [dataclasses.replace(r, seed=seed) for r in bt.suite_records(results, cfg.default_run_id())]


RUNNERS = {"theory": run_theory, "bandit": run_bandit, "mnist": run_mnist, "reversal": run_reversal}


def run_experiment(cfg: ExperimentConfig, seed: int | None = None) -> list[MetricRecord]:
    """Run one seed (or every configured seed) and return the metric rows."""
    cfg = cfg.resolved()
    seeds = cfg.seeds if seed is None else (seed,)
    rows = []
    data = _mnist_data(cfg) if cfg.kind == "mnist" else None
    for s in seeds:
        t0 = time.time()
        if cfg.kind == "mnist":
            out = run_mnist(cfg, s, data)
        else:
            out = RUNNERS[cfg.kind](cfg, s)
        log.info("%s seed %d done in %.1fs", cfg.default_run_id(), s, time.time() - t0)
        rows.extend(out)
    return rows


def final_metric(rows: list[MetricRecord], metric: str) -> dict[int, float]:
    """Last recorded value of ``metric`` per seed."""
    out: dict[int, tuple[int, float]] = {}
    for r in rows:
        if r.metric == metric and (r.seed not in out or r.step >= out[r.seed][0]):
            out[r.seed] = (r.step, r.value)
    return {s: v for s, (_, v) in out.items()}


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
