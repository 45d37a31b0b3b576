"""Command-line interface: run one experiment, compare methods over shared
seeds, or dump a partition audit."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import FedGeoError
from .harness import compare, output_root, partition_audit, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgeo",
        description="Deterministic federated-learning simulator with geometric "
                    "knowledge guidance and multi-prototype aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="path to a flat JSON config")
    run.add_argument("--seed", type=int, default=None, help="override master_seed")
    run.add_argument("--out", default=None, help="output root (default $FEDGEO_OUT or ./runs)")

    cmp_p = sub.add_parser("compare", help="run several configs over shared seeds")
    cmp_p.add_argument("--configs", nargs="+", required=True, help="config file paths")
    cmp_p.add_argument("--seeds", type=int, default=3, help="number of seeds per config")
    cmp_p.add_argument("--out", default=None, help="output root (default $FEDGEO_OUT or ./runs)")

    audit = sub.add_parser("partition-audit", help="dump the Dirichlet client assignment")
    audit.add_argument("--config", required=True, help="path to a flat JSON config")
    audit.add_argument("--out", default=None, help="output root (default $FEDGEO_OUT or ./runs)")
    return parser


def _load(path: str, seed: int | None = None) -> ExperimentConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.replace(master_seed=seed)
    if not cfg.run_name:
        cfg = cfg.replace(run_name=Path(path).stem)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load(args.config, args.seed)
            log = run_experiment(cfg, output_root(args.out))
            final = log.final_metrics()
            print(f"run {cfg.run_name}: rounds={log.rows[-1].round} "
                  f"accuracy={final.accuracy:.4f} avg_accuracy={final.average_accuracy:.4f} "
                  f"macro_f1={final.macro_f1:.4f} error_rate={final.error_rate:.4f} "
                  f"mae={final.mae:.4f}")
        elif args.command == "compare":
            configs = [(Path(p).stem, _load(p)) for p in args.configs]
            path = compare(configs, args.seeds, output_root(args.out))
            print(f"comparison written to {path}")
        else:
            cfg = _load(args.config)
            path = partition_audit(cfg, output_root(args.out))
            print(f"partition audit written to {path}")
    except FedGeoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
