"""Command-line entry point: ``frictionlab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .experiments import ConfigError, ExperimentConfig, load_config, run_experiment
from .fetch import FetchError, default_cache_dir, fetch_mnist
from .records import emit_records
from .search import SweepSpec, hstar_records, hstar_search, run_seeds, sweep

log = logging.getLogger("frictionlab")


def _seeds(text: str) -> tuple[int, ...]:
    """``3`` -> (3,); ``0-4`` -> (0..4); ``0,2,5`` -> (0, 2, 5)."""
    out = []
    for part in text.split(","):
        lo, dash, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if dash else [int(lo)])
    return tuple(out)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (ExperimentConfig field names)")
    p.add_argument("--seed", "--seeds", dest="seeds", type=_seeds, help="seed, range a-b, or list a,b,c")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--data-dir", help="MNIST cache directory (default: $DATA_DIR or ~/.cache/frictionlab/mnist)")
    p.add_argument("--offline", action="store_true", help="never touch the network")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes over seeds")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frictionlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in ("theory", "bandit", "mnist", "reversal"):
        _common(sub.add_parser(kind, help=f"run the {kind} experiment"))
    p = sub.add_parser("sweep", help="tune one parameter, then rerun the best on held-out seeds")
    _common(p)
    p.add_argument("--param", required=True, help="config field or estimator option (eta, eps, alpha)")
    p.add_argument("--grid", required=True, type=_floats)
    p.add_argument("--tuning-seeds", type=_seeds, default=(0, 1, 2))
    p.add_argument("--eval-seeds", type=_seeds, default=(100, 101, 102))
    p = sub.add_parser("hstar", help="largest solved horizon per method within an episode budget")
    _common(p)
    p.add_argument("--methods", default="dg:eta=1;pmpo:alpha=1;ppo:eps=0.2;reinforce",
                   help="semicolon-separated estimator strings")
    p.add_argument("--H-grid", type=_seeds, default=tuple(range(1, 21)))
    p.add_argument("--budget", type=int, default=10_000, help="episode budget per run")
    p = sub.add_parser("fetch-data", help="download and validate the MNIST IDX files")
    p.add_argument("--data-dir")
    p.add_argument("--offline", action="store_true")
    p.add_argument("--mirror", help="base URL of a gzip mirror, or a .tgz bundle URL")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args, kind: str | None) -> ExperimentConfig:
    from .experiments import parse_config_text

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if kind:
        cfg = dataclasses.replace(cfg, kind=kind)
    if args.set:
        cfg = parse_config_text("\n".join(args.set), cfg)
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=args.seeds)
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    data_dir = args.data_dir or os.environ.get("DATA_DIR") or cfg.data_dir
    if data_dir:
        cfg = dataclasses.replace(cfg, data_dir=data_dir)
    return cfg.resolved()


def _ensure_mnist(cfg: ExperimentConfig, offline: bool) -> None:
    fetch_mnist(cfg.data_dir or default_cache_dir(), offline=offline)


def _write(rows, cfg: ExperimentConfig) -> None:
    if cfg.out:
        path = emit_records(rows, cfg.out)
        log.info("wrote %d rows to %s", len(rows), path)
    else:
        emit_records(rows, "/dev/stdout")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "fetch-data":
            path = fetch_mnist(args.data_dir or default_cache_dir(), mirror=args.mirror, offline=args.offline)
            print(path)
            return 0
        if args.command in ("theory", "bandit", "mnist", "reversal"):
            cfg = _config(args, args.command)
            if cfg.kind == "mnist":
                _ensure_mnist(cfg, args.offline)
            if cfg.kind == "theory":
                from .bandit_theory import theory_property_suite

                for r in theory_property_suite(K=cfg.arms, rho=cfg.rho):
                    print(r.line(), file=sys.stderr)
            rows = run_seeds(cfg, cfg.seeds, args.workers) if args.workers > 1 else run_experiment(cfg)
            _write(rows, cfg)
            return 0
        if args.command == "sweep":
            cfg = _config(args, None)
            if cfg.kind == "mnist":
                _ensure_mnist(cfg, args.offline)
            res = sweep(SweepSpec(cfg, args.param, args.grid, args.tuning_seeds, args.eval_seeds), args.workers)
            for value, m, se in res.table:
                print(f"{args.param}={value:g}\tmean={m:.4f}\tstderr={se:.4f}", file=sys.stderr)
            print(f"best {args.param}={res.best:g}: held-out mean={res.eval_mean:.4f} "
                  f"stderr={res.eval_stderr:.4f}", file=sys.stderr)
            _write(res.records, cfg)
            return 0
        if args.command == "hstar":
            cfg = _config(args, "reversal")
            results = []
            for method in filter(None, (m.strip() for m in args.methods.split(";"))):
                res = hstar_search(dataclasses.replace(cfg, estimator=method), args.H_grid, args.budget,
                                   cfg.seeds)
                print(f"{res.method}\tH*={res.mean:g}\tper-seed={res.per_seed}", file=sys.stderr)
                results.append(res)
            _write(hstar_records(results, cfg.run_id or "hstar"), cfg)
            return 0
    except (ConfigError, FetchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
