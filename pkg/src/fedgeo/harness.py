"""Experiment execution: run directories, metric/CSV artifacts, and multi-seed
method comparisons."""
from __future__ import annotations

import csv
import os
import statistics
from pathlib import Path

from .config import ExperimentConfig, save_config
from .data import write_partition_csv
from .federation import RunLog, build_datasets, dirichlet_partition, resolve_method, run_training
from .models import save_checkpoint
from .seeds import derive_seed

__all__ = ["output_root", "run_experiment", "compare", "partition_audit"]

_METRIC_FIELDS = ("accuracy", "average_accuracy", "macro_f1", "error_rate", "mae")


def output_root(cli_out: str | None = None) -> Path:
    """Output directory root: --out flag, else $FEDGEO_OUT, else ./runs."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get("FEDGEO_OUT")
    return Path(env) if env else Path("runs")


def _run_dir(root: Path, name: str) -> Path:
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_experiment(config: ExperimentConfig, out_root: Path, name: str | None = None) -> RunLog:
    """Run one experiment and write metrics.csv, config.json, the final model
    checkpoint, and the partition audit under ``out_root/<name>``."""
    name = name or config.run_name or config.method
    run_dir = _run_dir(out_root, name)

    resolved = resolve_method(config).replace(run_name=name)
    save_config(resolved, run_dir / "config.json")

    log = run_training(config)
    log.to_metrics_csv(run_dir / "metrics.csv")
    save_checkpoint(log.final_params, run_dir / "checkpoint.bin")
    write_partition_csv(log.partition, run_dir / "partition.csv")
    if log.pretrain_curves:
        with open(run_dir / "pretrain_losses.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["client_id", "epoch", "se_index", "loss"])
            for cid in sorted(log.pretrain_curves):
                for epoch, k, loss in log.pretrain_curves[cid]:
                    w.writerow([cid, epoch, k, repr(loss)])
    return log


def compare(configs: list[tuple[str, ExperimentConfig]], n_seeds: int,
            out_root: Path) -> Path:
    """Run every config over a shared set of seeds and emit mean +/- stddev rows.

    Seeds are master_seed + i for i in range(n_seeds), identical across
    configs so methods see the same data and partitions.
    """
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, cfg in configs:
        finals = []
        for i in range(n_seeds):
            seeded = cfg.replace(master_seed=cfg.master_seed + i)
            log = run_experiment(seeded, out_root, name=f"{name}_seed{seeded.master_seed}")
            finals.append(log.final_metrics())
        row: dict[str, object] = {"config": name, "method": cfg.method, "seeds": n_seeds}
        for fieldname in _METRIC_FIELDS:
            vals = [getattr(m, fieldname) for m in finals]
            row[f"{fieldname}_mean"] = statistics.fmean(vals)
            row[f"{fieldname}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        rows.append(row)

    path = out_root / "comparison.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path


def partition_audit(config: ExperimentConfig, out_root: Path) -> Path:
    """Write the Dirichlet assignment of the config's training set as CSV."""
    name = (config.run_name or config.method) + "_partition"
    out_root.mkdir(parents=True, exist_ok=True)
    train, _, _ = build_datasets(config)
    partition = dirichlet_partition(train, config.n_clients, config.dirichlet_alpha,
                                    derive_seed(config.master_seed, "partition"))
    path = out_root / f"{name}.csv"
    write_partition_csv(partition, path)
    return path
