"""Experiment orchestration: build the problem, run rounds, write artifacts.

Each run owns one directory containing:
  manifest.txt        resolved config pinned to this run's seed (reparseable)
  partition.txt       client id -> sorted sample indices
  rounds.csv          one telemetry row per communication round
  final_model.bin     checkpoint of the aggregated model after the last round
  diagnostics.csv     per-round global loss / gradient instrumentation (optional)
  dissimilarity.csv   per-round dissimilarity measures (optional)

Reruns with the same config reproduce every artifact byte for byte.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, write_config
from .data import (
    LabeledDataset,
    Partition,
    ServerSet,
    SyntheticSpec,
    build_server_set,
    dirichlet_partition,
    generate_synthetic,
    load_csv,
    partition_stats,
    write_partition_manifest,
)
from .diagnostics import (
    DescentRecord,
    attach_grad_ratio,
    descent_check,
    dissimilarity_B,
    gradient_dissimilarity,
)
from .engine import (
    ClientState,
    RoundRecord,
    ServerState,
    make_server_state,
    run_round,
)
from .nn import ModelArch, init_model, save_model

ROUND_CSV_HEADER = "round,selected,mean_local_loss,global_acc_server,global_acc_test,agg_weights,flags"


@dataclass(frozen=True)
class Problem:
    """Everything a run needs: data splits, clients, and the initial server."""

    pool: LabeledDataset
    server_set: ServerSet
    test_set: LabeledDataset | None
    train_pool: LabeledDataset
    partition: Partition
    clients: list[ClientState]
    arch: ModelArch
    server: ServerState


@dataclass(frozen=True)
class RunResult:
    run_dir: Path
    records: list[RoundRecord]
    server: ServerState
    descent: list[DescentRecord] | None


def build_problem(cfg: ExperimentConfig, seed: int) -> Problem:
    if cfg.dataset == "synthetic":
        pool = generate_synthetic(
            SyntheticSpec(
                num_classes=cfg.num_classes,
                samples_per_class=cfg.samples_per_class,
                input_dim=cfg.input_dim,
                cluster_spread=cfg.cluster_spread,
                seed=seed,
            )
        )
    else:
        pool = load_csv(cfg.dataset)

    server_set, rest = build_server_set(pool, cfg.server_per_class, seed)
    if cfg.test_per_class > 0:
        # reuse the balanced-carve machinery; seed+1 keeps the draw distinct
        test_holdout, train_pool = build_server_set(rest, cfg.test_per_class, seed + 1)
        test_set: LabeledDataset | None = test_holdout.data
    else:
        test_set, train_pool = None, rest

    partition = dirichlet_partition(train_pool, cfg.clients, cfg.beta, seed)
    clients = [
        ClientState(id=cid, data=train_pool.subset(idxs))
        for cid, idxs in enumerate(partition.client_indices)
    ]
    arch = ModelArch((pool.input_dim, *cfg.hidden, pool.num_classes))
    model = init_model(arch, seed)
    server = make_server_state(model, server_set, cfg.clients)
    return Problem(
        pool=pool,
        server_set=server_set,
        test_set=test_set,
        train_pool=train_pool,
        partition=partition,
        clients=clients,
        arch=arch,
        server=server,
    )


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def _round_csv_row(rec: RoundRecord) -> str:
    selected = ";".join(str(c) for c in rec.selected)
    weights = ";".join(f"{cid}:{_fmt(w)}" for cid, w in rec.agg_weights.items())
    return ",".join(
        [
            str(rec.round),
            selected,
            _fmt(rec.mean_local_loss),
            _fmt(rec.global_acc_server),
            _fmt(rec.global_acc_test),
            weights,
            ";".join(rec.flags),
        ]
    )


def _write_rounds_csv(records: list[RoundRecord], path: Path) -> None:
    lines = [ROUND_CSV_HEADER] + [_round_csv_row(rec) for rec in records]
    path.write_text("\n".join(lines) + "\n")


def _write_diagnostics_csv(descent: list[DescentRecord], path: Path) -> None:
    lines = ["round,global_loss,global_grad_sqnorm,global_loss_after,lambda_hat"]
    for rec in descent:
        lines.append(
            ",".join(
                [
                    str(rec.round),
                    _fmt(rec.loss_before),
                    _fmt(rec.grad_sqnorm),
                    _fmt(rec.loss_after),
                    _fmt(rec.lambda_hat),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, seed: int, run_dir) -> RunResult:
    """Execute cfg.rounds communication rounds for one seed, writing artifacts."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg, seed)
    strategy = cfg.strategy_config()
    train = cfg.train_config(seed)

    write_config(cfg.for_seed(seed), run_dir / "manifest.txt")
    write_partition_manifest(problem.partition, run_dir / "partition.txt")

    server = problem.server
    records: list[RoundRecord] = []
    dissim_lines = ["round,grad_ratio,max_acc_ratio,acc_ratios,flags"]
    for _t in range(cfg.rounds):
        grad_ratio = None
        if cfg.emit_dissimilarity:
            grad_ratio = gradient_dissimilarity(
                server.model,
                [c.data for c in problem.clients],
                [len(c.data) for c in problem.clients],
            )
        server, rec = run_round(
            server,
            problem.clients,
            strategy,
            train,
            test_data=problem.test_set,
            instrument_global_loss=cfg.instrument_global_loss,
        )
        records.append(rec)
        if cfg.emit_dissimilarity:
            report = dissimilarity_B(
                rec.global_acc_server,
                [rec.measured_accuracies[cid] for cid in rec.selected],
                round_index=rec.round,
            )
            report = attach_grad_ratio(report, grad_ratio)
            ratios = ";".join(
                f"{cid}:inf" if math.isinf(r) else f"{cid}:{_fmt(r)}"
                for cid, r in zip(rec.selected, report.client_ratios)
            )
            dissim_lines.append(
                ",".join(
                    [
                        str(rec.round),
                        _fmt(report.grad_ratio),
                        "inf" if math.isinf(report.max_ratio) else _fmt(report.max_ratio),
                        ratios,
                        ";".join(report.flags),
                    ]
                )
            )

    _write_rounds_csv(records, run_dir / "rounds.csv")
    save_model(server.model, run_dir / "final_model.bin")

    descent = None
    if cfg.instrument_global_loss:
        descent = descent_check(records)
        _write_diagnostics_csv(descent, run_dir / "diagnostics.csv")
    if cfg.emit_dissimilarity:
        (run_dir / "dissimilarity.csv").write_text("\n".join(dissim_lines) + "\n")

    return RunResult(run_dir=run_dir, records=records, server=server, descent=descent)


def _final_metric(records: list[RoundRecord], attr: str) -> float:
    return getattr(records[-1], attr) if records else math.nan


def run_sweep(cfg: ExperimentConfig, out_root=None) -> list[RunResult]:
    """One run per configured seed; multi-seed sweeps get a summary CSV."""
    root = Path(out_root) if out_root is not None else Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_config(cfg, root / "config.resolved.txt")
    results = [
        run_experiment(cfg, seed, root / f"{cfg.strategy}-seed{seed}")
        for seed in cfg.seeds_list()
    ]
    if len(results) > 1:
        lines = ["seed,final_acc_server,final_acc_test"]
        for seed, res in zip(cfg.seeds_list(), results):
            lines.append(
                f"{seed},{_fmt(_final_metric(res.records, 'global_acc_server'))},"
                f"{_fmt(_final_metric(res.records, 'global_acc_test'))}"
            )
        for name, fn in (("mean", statistics.mean), ("stdev", statistics.stdev)):
            server_vals = [_final_metric(r.records, "global_acc_server") for r in results]
            test_vals = [_final_metric(r.records, "global_acc_test") for r in results]
            lines.append(f"{name},{_fmt(fn(server_vals))},{_fmt(fn(test_vals))}")
        (root / "sweep_summary.csv").write_text("\n".join(lines) + "\n")
    return results


def partition_report(cfg: ExperimentConfig, seed: int) -> str:
    """Text table of per-client class counts for the configured partition."""
    problem = build_problem(cfg, seed)
    counts = partition_stats(problem.partition, problem.train_pool)
    header = "client," + ",".join(f"class{c}" for c in range(counts.shape[1]))
    lines = [header]
    for cid, row in enumerate(counts):
        lines.append(f"{cid}," + ",".join(str(int(v)) for v in row))
    totals = counts.sum(axis=0)
    lines.append("total," + ",".join(str(int(v)) for v in totals))
    return "\n".join(lines) + "\n"
