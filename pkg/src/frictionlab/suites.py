"""Named experiment matrices behind the acceptance checks, with a per-seed CSV cache.

Each cell is one (config, seed) pair written to
``<results>/<suite>/<label>__s<seed>.csv``. Cells already on disk are read
back instead of rerun, so an interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .experiments import ExperimentConfig, final_metric, mean_stderr, run_experiment
from .records import MetricRecord, emit_records, read_records
from .search import HStarResult, hstar_records, hstar_search

log = logging.getLogger(__name__)

METHODS = ("dg:eta=1", "reinforce", "ppo:eps=0.2", "pmpo:alpha=1")
MNIST_METHODS = ("reinforce", "is_pg", "dg:eta=1")
SINGLE_FRICTIONS = {
    "stale": dict(D=30),
    "bug": dict(p_E=3e-3),
    "reward": dict(p_R=0.01),
}
HSTAR_BUDGET = 10_000
HSTAR_GRID = tuple(range(1, 21))


def results_dir() -> Path:
    return Path(os.environ.get("FRICTIONLAB_RESULTS", Path(__file__).resolve().parents[2] / "results"))


@dataclass(frozen=True)
class Cell:
    suite: str
    label: str
    config: ExperimentConfig
    seed: int

    def path(self, root: Path) -> Path:
        return root / self.suite / f"{self.label}__s{self.seed}.csv"


def _grid(suite: str, configs: dict[str, ExperimentConfig], seeds) -> list[Cell]:
    return [Cell(suite, label, cfg, s) for label, cfg in configs.items() for s in seeds]


def mnist_staleness() -> list[Cell]:
    cfgs = {f"D{D}_{m.split(':')[0]}": ExperimentConfig(kind="mnist", estimator=m, D=D, run_id=f"mnist-D{D}")
            for D in (0, 1000) for m in MNIST_METHODS}
    return _grid("mnist_staleness", cfgs, range(5))


def mnist_baseline() -> list[Cell]:
    cfgs = {m.split(":")[0]: ExperimentConfig(kind="mnist", estimator=m, D=30, baseline="zero",
                                              run_id="mnist-D30-zero")
            for m in MNIST_METHODS}
    return _grid("mnist_baseline", cfgs, range(3))


def reversal_single() -> list[Cell]:
    cfgs = {f"{name}_{m.split(':')[0]}": ExperimentConfig(kind="reversal", estimator=m, run_id=f"single-{name}", **kw)
            for name, kw in SINGLE_FRICTIONS.items() for m in METHODS}
    return _grid("reversal_single", cfgs, range(5))


def reversal_rare() -> list[Cell]:
    cfgs = {m.split(":")[0]: ExperimentConfig(kind="reversal", estimator=m, H=5, kappa=-1.0, p_C=1e-3,
                                              run_id="rare-discovery")
            for m in METHODS}
    return _grid("reversal_rare", cfgs, range(5))


def combined_config(method: str, **kw) -> ExperimentConfig:
    return ExperimentConfig(kind="reversal", estimator=method, D=30, p_E=3e-3, p_R=0.01, p_C=1e-3,
                            kappa=-1.0, **kw)


def reversal_combined() -> list[Cell]:
    cfgs = {m.split(":")[0]: combined_config(m, H=5, run_id="combined-H5") for m in METHODS}
    return _grid("reversal_combined", cfgs, range(3))


SUITES = {
    "mnist_staleness": mnist_staleness,
    "mnist_baseline": mnist_baseline,
    "reversal_combined": reversal_combined,
    "reversal_rare": reversal_rare,
    "reversal_single": reversal_single,
}


def run_cell(cell: Cell, root: Path | None = None, compute: bool = True) -> list[MetricRecord] | None:
    path = cell.path(root or results_dir())
    if path.exists():
        return read_records(path)
    if not compute:
        return None
    t0 = time.time()
    rows = run_experiment(cell.config, cell.seed)
    emit_records(rows, path)
    log.info("%s/%s seed %d: %.0fs", cell.suite, cell.label, cell.seed, time.time() - t0)
    return rows


def load_suite(name: str, root: Path | None = None, compute: bool = False) -> dict[str, list[MetricRecord]]:
    """Rows per label; with ``compute=False`` missing cells raise ``FileNotFoundError``."""
    out: dict[str, list[MetricRecord]] = {}
    for cell in SUITES[name]():
        rows = run_cell(cell, root, compute)
        if rows is None:
            raise FileNotFoundError(cell.path(root or results_dir()))
        out.setdefault(cell.label, []).extend(rows)
    return out


def summary(rows: list[MetricRecord], metric: str) -> tuple[float, float]:
    return mean_stderr(final_metric(rows, metric).values())


# ------------------------------------------------------------------------- H*


def hstar_path(method: str, seed: int, root: Path | None = None) -> Path:
    return (root or results_dir()) / "hstar" / f"{method.split(':')[0]}__s{seed}.csv"


def run_hstar(method: str, seed: int, root: Path | None = None, compute: bool = True) -> HStarResult | None:
    path = hstar_path(method, seed, root)
    if path.exists():
        rows = read_records(path)
        per_seed = {r.seed: int(r.value) for r in rows if r.metric == "h_star"}
        probes = {(r.seed, r.step): bool(r.value) for r in rows if r.metric == "solved"}
        return HStarResult(rows[0].method, per_seed, probes)
    if not compute:
        return None
    res = hstar_search(combined_config(method, run_id="hstar"), HSTAR_GRID, HSTAR_BUDGET, (seed,))
    emit_records(hstar_records([res], "hstar"), path)
    return res


def load_hstar(root: Path | None = None, compute: bool = False, seeds=range(3)) -> dict[str, list[int]]:
    out = {}
    for m in METHODS:
        values = []
        for s in seeds:
            res = run_hstar(m, s, root, compute)
            if res is None:
                raise FileNotFoundError(hstar_path(m, s, root))
            values.append(res.per_seed[s])
        out[m.split(":")[0]] = values
    return out


def all_cells() -> list[Cell]:
    return [c for build in SUITES.values() for c in build()]

