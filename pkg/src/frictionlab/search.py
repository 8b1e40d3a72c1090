"""Hyperparameter sweeps and the largest-solved-horizon (H*) search."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorKind
from .experiments import ExperimentConfig, final_metric, mean_stderr, run_experiment
from .records import MetricRecord

log = logging.getLogger(__name__)

ETA_GRID = (0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
CLIP_GRID = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0)
ALPHA_GRID = CLIP_GRID
ESTIMATOR_PARAMS = {"eta": "dg", "eps": "ppo", "alpha": "pmpo"}


def with_param(cfg: ExperimentConfig, name: str, value) -> ExperimentConfig:
    """Set an ExperimentConfig field, or an estimator option (eta / eps / alpha)."""
    if name in ESTIMATOR_PARAMS:
        est = EstimatorKind.parse(cfg.estimator)
        if est.name != ESTIMATOR_PARAMS[name]:
            raise ValueError(f"{name} is a {ESTIMATOR_PARAMS[name]} option, estimator is {est.name}")
        return dataclasses.replace(cfg, estimator=str(dataclasses.replace(est, **{name: float(value)})))
    if name not in {f.name for f in dataclasses.fields(ExperimentConfig)}:
        raise ValueError(f"unknown sweep parameter {name!r}")
    return dataclasses.replace(cfg, **{name: value})


def final_error_metric(kind: str) -> str:
    return {"reversal": "sequence_error", "mnist": "test_error", "bandit": "suboptimality"}[kind]


def _run_seed(args):
    cfg, seed = args
    return run_experiment(cfg, seed)


def run_seeds(cfg: ExperimentConfig, seeds, workers: int = 1) -> list[MetricRecord]:
    """All ``seeds`` of one config, optionally across worker processes."""
    jobs = [(cfg, s) for s in seeds]
    if workers <= 1 or len(jobs) == 1:
        return [r for job in jobs for r in _run_seed(job)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [r for rows in pool.map(_run_seed, jobs) for r in rows]


@dataclass
class SweepSpec:
    base: ExperimentConfig
    param: str
    grid: tuple
    tuning_seeds: tuple[int, ...] = (0, 1, 2)
    eval_seeds: tuple[int, ...] = (100, 101, 102)


@dataclass
class SweepResult:
    param: str
    table: list[tuple[float, float, float]]  # (value, mean final error, stderr) on tuning seeds
    best: float
    eval_mean: float
    eval_stderr: float
    records: list[MetricRecord] = field(default_factory=list)


def sweep(spec: SweepSpec, workers: int = 1) -> SweepResult:
    """Tune on ``tuning_seeds``, pick the lowest mean final error, rerun on ``eval_seeds``.

    Ties go to the smaller parameter value.
    """
    if not spec.grid:
        raise ValueError("sweep grid is empty")
    metric = final_error_metric(spec.base.kind)
    table, records = [], []
    for value in spec.grid:
        cfg = with_param(spec.base, spec.param, value)
        cfg = dataclasses.replace(cfg, run_id=f"sweep-{spec.param}={value}")
        rows = run_seeds(cfg, spec.tuning_seeds, workers)
        records += rows
        m, se = mean_stderr(final_metric(rows, metric).values())
        table.append((value, m, se))
        log.info("%s=%s: %s %.4f +- %.4f", spec.param, value, metric, m, se)
    best = min(table, key=lambda t: (t[1], t[0]))[0]
    cfg = dataclasses.replace(with_param(spec.base, spec.param, best), run_id=f"sweep-eval-{spec.param}={best}")
    rows = run_seeds(cfg, spec.eval_seeds, workers)
    records += rows
    m, se = mean_stderr(final_metric(rows, metric).values())
    return SweepResult(spec.param, table, best, m, se, records)


@dataclass
class HStarResult:
    method: str
    per_seed: dict[int, int]  # H* per seed (0 when even the first H failed)
    probes: dict[tuple[int, int], bool]  # (seed, H) -> success within budget

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_seed.values()))) if self.per_seed else 0.0


def hstar_search(base: ExperimentConfig, H_grid, episode_budget: int, seeds=(0,),
                 episodes_per_step: int | None = None) -> HStarResult:
    """Largest H with at least one raw perfect (non-injected) training episode within budget.

    ``H_grid`` must be ascending; the search stops at the first H that fails,
    so the reported H* always has a recorded success and H* + 1 (when probed)
    has none. The budget is in episodes and converted to whole gradient
    steps of ``n_prompts * group_size`` episodes each.
    """
    H_grid = list(H_grid)
    if any(b <= a for a, b in zip(H_grid, H_grid[1:])):
        raise ValueError("H grid must be strictly ascending")
    per_step = episodes_per_step or base.n_prompts * base.group_size
    steps = episode_budget // per_step
    method = str(EstimatorKind.parse(base.estimator))
    per_seed, probes = {}, {}
    for seed in seeds:
        h_star = 0
        if steps > 0:
            for H in H_grid:
                cfg = dataclasses.replace(base, H=H, steps=steps, eval_every=max(steps, 1),
                                          stop_on_success=True, run_id=f"hstar-H{H}")
                rows = run_experiment(cfg, seed)
                first = final_metric(rows, "first_success_episode").get(seed, -1)
                ok = 0 < first <= episode_budget
                probes[(seed, H)] = ok
                log.info("%s seed %d H=%d: %s (first success episode %d)", method, seed, H,
                         "solved" if ok else "no success", first)
                if not ok:
                    break
                h_star = H
        per_seed[seed] = h_star
    return HStarResult(method, per_seed, probes)


def hstar_records(results: list[HStarResult], run_id: str = "hstar") -> list[MetricRecord]:
    rows = []
    for res in results:
        for seed, h in res.per_seed.items():
            rows.append(MetricRecord(run_id, seed, 0, res.method, "h_star", float(h)))
        for (seed, H), ok in res.probes.items():
            rows.append(MetricRecord(run_id, seed, H, res.method, "solved", float(ok)))
    return rows

