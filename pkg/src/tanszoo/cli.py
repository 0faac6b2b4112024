"""Command-line entry point: ``tanszoo <command> [options]``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numerical divergence.
Every command writes a JSON run manifest (``--manifest``, or next to the
main output, or ``<command>.manifest.json`` in the working directory).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bench import BenchConfig, run_bench
from .config import ConfigError, build, load_config
from .contrastive import TrainConfig, TrainingDivergence, meta_train
from .encoders import encode_model, encode_query
from .predictor import predict
from .retrieval import build_index, evaluate_retrieval, load_index, retrieve, save_index
from .synth import SynthConfig, build_full_zoo
from .zoo import Constraints, ZooError, load_zoo, save_zoo
from .zoo_builder import BuilderConfig, construct_zoo

log = logging.getLogger("tanszoo")

EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGENCE = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, bytes):
        return obj.hex()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


class Run:
    """Collects what goes into a command's manifest."""

    def __init__(self, command: str, argv: Sequence[str]):
        self.command = command
        self.argv = list(argv)
        self.config: dict[str, Any] = {}
        self.seeds: dict[str, int] = {}
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.start = time.perf_counter()

    def manifest(self) -> dict:
        def files(paths):
            return [{"path": str(p), "sha256": _sha256(p) if p.is_file() else None} for p in paths]

        return {"tool": "tanszoo", "version": __version__, "command": self.command,
                "argv": self.argv, "config": _jsonable(self.config), "seeds": self.seeds,
                "inputs": files(self.inputs), "outputs": files(self.outputs),
                "wall_time_s": round(time.perf_counter() - self.start, 6)}


def _input(run: Run, path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {path}")
    run.inputs.append(p)
    return p


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--manifest", help="where to write the run manifest (JSON)")
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: CPU count)")
    if seed:
        p.add_argument("--seed", type=int, default=None, dest="rng_seed",
                       help="RNG seed (default: $TANSZOO_SEED or 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tanszoo", description="Task-adaptive neural network search on a synthetic model zoo.")
    parser.add_argument("--version", action="version", version=f"tanszoo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate the full synthetic zoo")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-datasets", type=int, dest="n_datasets")
    p.add_argument("--networks-per-dataset", type=int, dest="networks_per_dataset")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")

    p = sub.add_parser("train", help="meta-train encoders and predictor, write an index")
    _common(p)
    p.add_argument("--zoo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--neg-aggregation", choices=("sum", "mean"), dest="neg_aggregation")

    p = sub.add_parser("index", help="embed a zoo with the parameters stored in an index")
    _common(p, seed=False)
    p.add_argument("--params", required=True, help="index file holding trained parameters")
    p.add_argument("--zoo", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", help="top-k networks for a probe set")
    _common(p, seed=False)
    p.add_argument("--index", required=True)
    p.add_argument("--probe", required=True, help="JSONL, one feature row per line")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--max-params", type=int)
    p.add_argument("--max-flops", type=int)
    p.add_argument("--max-latency", type=float)
    p.add_argument("--rerank", action="store_true")

    p = sub.add_parser("predict", help="predicted accuracy of one network on one dataset")
    _common(p, seed=False)
    p.add_argument("--index", required=True)
    p.add_argument("--zoo", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("eval", help="retrieval metrics on held-out probes")
    _common(p, seed=False)
    p.add_argument("--index", required=True)
    p.add_argument("--zoo", required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")

    p = sub.add_parser("construct-zoo", help="select a budgeted zoo from a universe")
    _common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="hypervolume trace CSV (default: <out>.trace.csv)")
    p.add_argument("--strategy", choices=("greedy", "random", "largest-param"))
    p.add_argument("--n-init", type=int, dest="n_init")

    p = sub.add_parser("bench", help="full reproduction suite; writes report.md and CSVs")
    _common(p)
    p.add_argument("--out-dir", default="bench_out")
    p.add_argument("--epochs", type=int)
    return parser


def _configs(args, run: Run):
    file_values = load_config(args.config)
    flags = vars(args)
    return file_values, flags


def _jobs(args) -> int:
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def cmd_gen(args, run: Run) -> int:
    file_values, flags = _configs(args, run)
    cfg = build(SynthConfig, file_values, flags)
    run.config["synth"] = cfg
    run.seeds["rng_seed"] = cfg.rng_seed
    zoo = build_full_zoo(cfg, _jobs(args))
    out = Path(args.out)
    save_zoo(zoo, out)
    run.outputs += [out, out.with_name(out.name + ".bin")]
    print(json.dumps({"datasets": len(zoo.datasets), "networks": len(zoo.networks),
                      "entries": len(zoo.entries)}))
    return 0


def cmd_train(args, run: Run) -> int:
    file_values, flags = _configs(args, run)
    cfg = build(TrainConfig, file_values, flags)
    run.config["train"] = cfg
    run.seeds.update(rng_seed=cfg.rng_seed, noise_seed=cfg.noise_seed)
    zoo = load_zoo(_input(run, args.zoo))
    zoo.validate()
    result = meta_train(zoo, cfg)
    index = build_index(zoo, result.model, cfg)
    out = Path(args.out)
    save_index(index, out)
    trace = Path(args.trace) if args.trace else out.with_suffix(out.suffix + ".trace.csv")
    with trace.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_m", "L_q", "L_s", "total"])
        for row in result.trace:
            w.writerow([row["epoch"], *(repr(row[k]) for k in ("L_m", "L_q", "L_s", "total"))])
    run.outputs += [out, trace]
    print(json.dumps(result.metrics))
    return 0


def cmd_index(args, run: Run) -> int:
    src = load_index(_input(run, args.params))
    zoo = load_zoo(_input(run, args.zoo))
    zoo.validate()
    index = build_index(zoo, src.model)
    index.rng_seed, index.fingerprint = src.rng_seed, src.fingerprint
    out = Path(args.out)
    save_index(index, out)
    run.outputs.append(out)
    run.seeds.update(rng_seed=src.rng_seed, noise_seed=src.noise_seed)
    print(json.dumps({"models": len(index.model_ids), "dim": index.dim}))
    return 0


def read_probe(path: Path) -> np.ndarray:
    """JSONL probe file: each line is a feature list or an object with "features"."""
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: {exc.msg}") from None
        rows.append(obj["features"] if isinstance(obj, dict) else obj)
    if not rows:
        raise ValueError(f"{path}: empty probe set")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{path}: probe rows must all have the same length")
    return arr


def cmd_retrieve(args, run: Run) -> int:
    index = load_index(_input(run, args.index))
    probe = read_probe(_input(run, args.probe))
    cons = Constraints(args.max_params, args.max_flops, args.max_latency)
    run.config["retrieve"] = {"k": args.k, "rerank": args.rerank, "constraints": cons}
    res = retrieve(index, probe, args.k, cons, args.rerank)
    print(json.dumps(res.to_json()))
    return 0


def cmd_predict(args, run: Run) -> int:
    index = load_index(_input(run, args.index))
    zoo = load_zoo(_input(run, args.zoo))
    if args.dataset not in zoo.datasets:
        raise ValueError(f"unknown dataset id {args.dataset!r}")
    if args.model in index.model_ids:
        m = index.embeddings[index.row(args.model)].astype(np.float64)
    elif args.model in zoo.networks:
        m = encode_model(zoo.networks[args.model], index.model.model,
                         index.model.encoder.model_inputs)
    else:
        raise ValueError(f"unknown model id {args.model!r}")
    q = encode_query(zoo.datasets[args.dataset].probe_set, index.model.query)
    print(json.dumps({"dataset": args.dataset, "model": args.model,
                      "predicted_accuracy": predict(q, m, index.model.predictor)}))
    return 0


def cmd_eval(args, run: Run) -> int:
    index = load_index(_input(run, args.index))
    zoo = load_zoo(_input(run, args.zoo))
    metrics = evaluate_retrieval(index, zoo)
    if args.json:
        print(json.dumps(metrics))
    else:
        print(f"{'metric':<12} value")
        for k, v in metrics.items():
            print(f"{k:<12} {v:.4f}")
    return 0


def cmd_construct(args, run: Run) -> int:
    file_values, flags = _configs(args, run)
    cfg = build(BuilderConfig, file_values, flags)
    run.config["builder"] = cfg
    run.seeds["rng_seed"] = cfg.rng_seed
    universe = load_zoo(_input(run, args.universe))
    universe.validate()
    res = construct_zoo(universe, cfg)
    out = Path(args.out)
    save_zoo(res.zoo, out)
    trace = Path(args.trace) if args.trace else out.with_suffix(out.suffix + ".trace.csv")
    with trace.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total_hypervolume"])
        for i, v in enumerate(res.trace):
            w.writerow([i, repr(v)])
    run.outputs += [out, out.with_name(out.name + ".bin"), trace]
    print(json.dumps({"selected": len(res.selected), "total_hypervolume": res.trace[-1]}))
    return 0


def cmd_bench(args, run: Run) -> int:
    file_values, flags = _configs(args, run)
    synth = build(SynthConfig, file_values, flags)
    train = build(TrainConfig, file_values, flags)
    bench = build(BenchConfig, file_values, flags)
    builder = {k: v for k, v in file_values.items()
               if k in {f.name for f in dataclasses.fields(BuilderConfig)}
               and k not in ("budget", "rng_seed", "strategy")}
    run.config.update(synth=synth, train=train, bench=bench, builder=builder)
    run.seeds["rng_seed"] = bench.rng_seed
    out = Path(args.out_dir)
    summary = run_bench(out, synth, train, bench, builder, _jobs(args))
    run.outputs += sorted(p for p in out.iterdir() if p.suffix in (".md", ".csv"))
    print(json.dumps(_jsonable(summary)))
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "index": cmd_index, "retrieve": cmd_retrieve,
            "predict": cmd_predict, "eval": cmd_eval, "construct-zoo": cmd_construct,
            "bench": cmd_bench}


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if getattr(args, "out", None):
        return Path(args.out + ".manifest.json")
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "manifest.json"
    return Path(f"{args.command}.manifest.json")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="")
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv)
    try:
        code = COMMANDS[args.command](args, run)
        path = _manifest_path(args)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(run.manifest(), indent=2, sort_keys=True) + "\n")
        return code
    except TrainingDivergence as exc:
        return _fail(EXIT_DIVERGENCE, "divergence", exc)
    except (ZooError, ConfigError, ValueError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
