"""Metric rows and the CSV sink shared by every experiment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

HEADER = ("run_id", "seed", "step", "method", "metric", "value")


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    seed: int
    step: int
    method: str
    metric: str
    value: float

    def sort_key(self):
        return (self.seed, self.step, self.metric)


def _fmt(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    # repr round-trips doubles exactly, which keeps resumed files byte-stable.
    return repr(float(value))


def emit_records(records: Iterable[MetricRecord], path, append: bool = False) -> Path:
    """Write records sorted by (seed, step, metric).

    With ``append=True`` rows are added to an existing file (header written
    only if the file is new or empty), so resumed runs extend the same CSV.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(records, key=MetricRecord.sort_key)
    new_file = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new_file:
            writer.writerow(HEADER)
        for r in rows:
            writer.writerow([r.run_id, r.seed, r.step, r.method, r.metric, _fmt(r.value)])
    return path


def read_records(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [
            MetricRecord(run_id, int(seed), int(step), method, metric, float(value))
            for run_id, seed, step, method, metric, value in reader
        ]
