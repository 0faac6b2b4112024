"""End-to-end reproduction suite: generate, construct, train, evaluate, ablate.

Everything written to the report is a pure function of the configs, so two
runs with the same seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .contrastive import TrainConfig, meta_train
from .retrieval import (
    EmbeddingIndex,
    baseline_retrievers,
    build_index,
    constant_mse,
    evaluate_retrieval,
    predictor_mse,
    ranking_metrics,
    retrieve,
    untrained_index,
)
from .synth import SynthConfig, build_full_zoo, evaluate_network
from .zoo import Constraints, ModelZoo
from .zoo_builder import BuilderConfig, construct_zoo

log = logging.getLogger(__name__)

# settings for the predictor used in constrained retrieval (see README)
CONSTRAINT_TRAINING = {"surrogate_pairs": "cross", "surrogate_weight": 5.0}


@dataclass(frozen=True)
class ConstraintCase:
    dataset_id: str
    constraints: Constraints


def constraint_cases(zoo: ModelZoo, n: int = 50, seed: int = 0) -> list[ConstraintCase]:
    """Bounds drawn from the costs of each dataset's own networks.

    Datasets are visited round-robin; each case caps params, FLOPs or both
    at the cost of a randomly chosen network from the upper half of that
    dataset's networks, so at least one of its own networks stays feasible.
    """
    rng = np.random.default_rng([seed, 61])
    ds_ids = sorted(zoo.datasets)
    cases = []
    for c in range(n):
        d = ds_ids[c % len(ds_ids)]
        nets = sorted((zoo.networks[e.network_id] for e in zoo.entries_for(d)),
                      key=lambda net: (net.param_count, net.id))
        ref = nets[int(rng.integers(len(nets) // 2, len(nets)))]
        kind = c % 3
        cases.append(ConstraintCase(d, Constraints(
            max_params=ref.param_count if kind in (0, 2) else None,
            max_flops=ref.macs if kind in (1, 2) else None)))
    return cases


def constraint_eval(index: EmbeddingIndex, zoo: ModelZoo, cases: Sequence[ConstraintCase],
                    rerank: bool, k: int = 10) -> list[dict]:
    """Per case: does every hit satisfy the bound, and is top-1 as good as the best feasible?"""
    rows = []
    for case in cases:
        ds = zoo.datasets[case.dataset_id]
        res = retrieve(index, ds.probe_set, k, case.constraints, rerank)
        valid = all(case.constraints.admits(zoo.networks[h].param_count, zoo.networks[h].macs,
                                            zoo.networks[h].latency) for h in res.model_ids)
        feasible = [e.accuracy for e in zoo.entries_for(case.dataset_id)
                    if case.constraints.admits(zoo.networks[e.network_id].param_count,
                                               zoo.networks[e.network_id].macs,
                                               zoo.networks[e.network_id].latency)]
        best = max(feasible)
        top_acc = evaluate_network(zoo.networks[res.model_ids[0]], ds) if res.hits else 0.0
        rows.append({"dataset": case.dataset_id, "max_params": case.constraints.max_params,
                     "max_flops": case.constraints.max_flops, "top1": res.model_ids[0],
                     "top1_accuracy": top_acc, "best_feasible": best,
                     "all_valid": valid, "success": top_acc >= best})
    return rows


@dataclass
class BenchConfig:
    rng_seed: int = 0
    budget_fraction: float = 0.5
    constraint_cases: int = 50
    holdout_fraction: float = 0.2


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _table(rows: list[dict]) -> list[str]:
    keys = list(rows[0])
    out = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    out += ["| " + " | ".join(_fmt(r[k]) for k in keys) + " |" for r in rows]
    return out


def run_bench(out_dir: str | Path, synth: SynthConfig, train: TrainConfig,
              bench: BenchConfig, builder_overrides: dict | None = None, jobs: int = 1) -> dict:
    """Run the suite and write report.md plus CSVs into ``out_dir``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoo = build_full_zoo(synth, jobs)
    summary: dict = {}

    # zoo construction at equal budget
    budget = max(1, int(round(bench.budget_fraction * len(zoo.entries))))
    cons_rows, cons_summary = [], []
    for strategy in ("greedy", "random", "largest-param"):
        bcfg = BuilderConfig(**{"budget": budget, "rng_seed": bench.rng_seed,
                                **(builder_overrides or {}), "strategy": strategy})
        res = construct_zoo(zoo, bcfg)
        cons_rows += [{"strategy": strategy, "step": i, "total_hypervolume": v}
                      for i, v in enumerate(res.trace)]
        cons_summary.append({"strategy": strategy, "budget": budget,
                             "final_total_hypervolume": res.trace[-1]})
    _write_csv(out / "construction.csv", cons_rows)
    summary["construction"] = cons_summary

    # retrieval and ablations
    full = meta_train(zoo, train)
    index = build_index(zoo, full.model, train)
    _write_csv(out / "loss_trace.csv", full.trace)
    ret_rows = [{"method": "contrastive", **evaluate_retrieval(index, zoo)}]
    topo_cfg = dataclasses.replace(train, model_inputs="topology")
    topo = build_index(zoo, meta_train(zoo, topo_cfg).model, topo_cfg)
    ret_rows.append({"method": "topology_only", **evaluate_retrieval(topo, zoo)})
    ret_rows.append({"method": "untrained", **evaluate_retrieval(untrained_index(zoo, train), zoo)})
    for name, fn in baseline_retrievers(zoo, index, bench.rng_seed, train).items():
        ret_rows.append({"method": name, **ranking_metrics(fn, index, zoo)})
    _write_csv(out / "retrieval.csv", ret_rows)
    summary["retrieval"] = ret_rows

    # predictor on held-out networks
    held_cfg = dataclasses.replace(train, holdout_fraction=bench.holdout_fraction)
    held = meta_train(zoo, held_cfg)
    hidx = build_index(zoo, held.model, held_cfg)
    pred_rows = [
        {"predictor": "full", "mse": predictor_mse(hidx, zoo, held.heldout_entries)},
        {"predictor": "without_query", "mse": predictor_mse(hidx, zoo, held.heldout_entries, "query")},
        {"predictor": "without_model", "mse": predictor_mse(hidx, zoo, held.heldout_entries, "model")},
        {"predictor": "constant_mean", "mse": constant_mse(held.train_entries, held.heldout_entries)},
    ]
    _write_csv(out / "predictor.csv", pred_rows)
    summary["predictor"] = pred_rows

    # constrained retrieval
    ccfg = dataclasses.replace(train, **CONSTRAINT_TRAINING)
    cidx = build_index(zoo, meta_train(zoo, ccfg).model, ccfg)
    cases = constraint_cases(zoo, bench.constraint_cases, bench.rng_seed)
    c_rows = []
    for rerank in (True, False):
        rows = constraint_eval(cidx, zoo, cases, rerank)
        c_rows += [{"rerank": rerank, **r} for r in rows]
        summary[f"constraint_success_rerank_{rerank}"] = float(np.mean([r["success"] for r in rows]))
        summary[f"constraint_valid_rerank_{rerank}"] = all(r["all_valid"] for r in rows)
    _write_csv(out / "constraints.csv", c_rows)

    lines = ["# tanszoo benchmark", "",
             f"Seed {bench.rng_seed}; {len(zoo.datasets)} datasets, {len(zoo.networks)} networks.",
             "", "## Zoo construction (total hypervolume at equal budget)", "",
             *_table(cons_summary), "", "## Retrieval on held-out probes", "",
             *_table(ret_rows), "", "## Predictor MSE on held-out networks", "",
             *_table(pred_rows), "", "## Constrained retrieval", "",
             *_table([{"rerank": rr,
                       "top1_matches_best": summary[f"constraint_success_rerank_{rr}"],
                       "all_hits_feasible": summary[f"constraint_valid_rerank_{rr}"]}
                      for rr in (True, False)]), ""]
    (out / "report.md").write_text("\n".join(lines))
    return summary
