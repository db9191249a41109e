"""Command line entry point: ``fedgnids <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import yaml

from . import pipeline
from .adversary import AttackConfig
from .graph import PartitionMap, build_graph, partition_nodes
from .io import (
    DataFormatError,
    ExperimentConfig,
    dump_json,
    experiment_from_dict,
    load_synth_spec,
    synth_dataset,
    write_edge_csv,
    write_id_map,
    write_partition,
)
from .model import load_params, save_params

logger = logging.getLogger("fedgnids")

LOG_ENV = "FEDGNIDS_LOG_LEVEL"
REPORT_COLUMNS = ("ap", "auc", "precision", "recall", "fpr_printed", "fpr_conventional", "sr", "epm")
EXIT_DIVERGED = 3


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a mapping at the top level")
    if args.seed is not None:
        doc.setdefault("seeds", {})
        doc["seeds"] = {**(doc["seeds"] or {}), "base": args.seed}
    fed = dict(doc.get("federation") or {})
    if getattr(args, "workers", None) is not None:
        fed["workers"] = args.workers
    if getattr(args, "scheme", None) is not None:
        fed["scheme"] = args.scheme
    doc["federation"] = fed
    cfg = experiment_from_dict(doc, base_dir=path.parent)
    out = getattr(args, "out", None)
    if out is not None:
        cfg = replace(cfg, output_dir=str(Path(out).resolve()))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.resolve(cfg.output_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_training(cfg: ExperimentConfig, result: pipeline.TrainResult) -> Path:
    out = _out_dir(cfg)
    save_params(result.params, out / "model")
    pipeline.write_weight_log(out / "weights.csv", result.weight_log)
    dump_json(out / "history.json", pipeline.history_doc(cfg, result))
    return out


def _train(cfg: ExperimentConfig) -> int:
    prep = pipeline.prepare(cfg)
    result = pipeline.train(cfg, prep)
    out = _write_training(cfg, result)
    if result.diverged:
        print(f"error: {result.state.diagnosis}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {cfg.federation.scheme} for {len(result.state.history)} iterations -> {out}")
    return 0


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    graph, blocks = synth_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_csv(out / "events.csv", graph.events)
    with (out / "blocks.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("node_id", "block"))
        writer.writerows(sorted(blocks.items()))
    dump_json(out / "synth.json", asdict(spec))
    n_bad = sum(e.label for e in graph.events)
    print(f"{len(graph.events)} events ({n_bad} labelled malicious) -> {out}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    events, id_map, _, _ = pipeline.load_events(cfg)
    graph = build_graph(events, "degree")
    pm: PartitionMap = partition_nodes(graph, cfg.federation.K, args.strategy or cfg.data.partition_strategy, cfg.seeds.partition)
    target = Path(args.output) if args.output else _out_dir(cfg) / "partition.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    names = None if id_map is None else {i: n for n, i in id_map.items()}
    write_partition(target, pm, names)
    if id_map is not None:
        write_id_map(target.with_name("id_map.csv"), id_map)
    print(" ".join(f"client {k}: {n}" for k, n in sorted(pm.sizes().items())))
    return 0


def cmd_train(args) -> int:
    return _train(_load_config(args))


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    attack = cfg.attack
    if args.malicious is not None or args.p is not None or args.gamma is not None or attack is None:
        malicious = args.malicious if args.malicious is not None else (sorted(attack.malicious_clients) if attack else None)
        if not malicious:
            raise CliError("attack needs malicious clients (config [attack] or --malicious)")
        attack = AttackConfig(
            frozenset(malicious),
            args.p if args.p is not None else (attack.p if attack else 1.0),
            args.gamma if args.gamma is not None else (attack.gamma if attack else 1.0),
            attack.seed if attack else cfg.seeds.attack,
        )
        attack.validate(cfg.federation.K)
        cfg = replace(cfg, attack=attack)
    return _train(cfg)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = cfg.resolve(cfg.output_dir)
    model_path = Path(args.model) if args.model else out / "model"
    if not model_path.with_suffix(".bin").is_file():
        raise CliError(f"no trained model at {model_path.with_suffix('.bin')}; run train first")
    params = load_params(model_path)
    hist = out / "history.json"
    trained = json.loads(hist.read_text(encoding="utf-8")) if hist.is_file() else {}
    # score with the scheme and attack the model was trained under
    run_cfg = trained.get("config") or {}
    if trained.get("scheme"):
        cfg = replace(cfg, federation=replace(cfg.federation, scheme=trained["scheme"]))
    if cfg.attack is None and run_cfg.get("attack"):
        a = run_cfg["attack"]
        cfg = replace(cfg, attack=AttackConfig(frozenset(a["malicious_clients"]), a["p"], a["gamma"], a.get("seed", cfg.seeds.attack)))
    prep = pipeline.prepare(cfg)
    if params.dims != pipeline.model_dims(cfg, prep):
        raise CliError(f"model dims {params.dims} do not match the configured data")
    result = pipeline.evaluate(cfg, params, prep)
    out.mkdir(parents=True, exist_ok=True)
    doc = dict(result.metrics)
    doc["scheme"] = cfg.federation.scheme
    doc["degenerate_threshold"] = result.degenerate_threshold
    if trained:
        doc["aborted"] = trained.get("aborted", False)
        doc["diagnosis"] = trained.get("diagnosis")
    dump_json(out / "metrics.json", doc)
    pipeline.write_pr_curve(out / "pr_curve.csv", result.pr_points())
    print(f"AP {doc['ap']:.4f}  AUC {doc['auc']:.4f}  tau {doc['tau']:.4f} -> {out / 'metrics.json'}")
    return 0


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and v != v:
        return "NaN"
    return f"{100.0 * v:.2f}"


def render_report(rows: Sequence[dict]) -> str:
    header = ["run", "scheme", *REPORT_COLUMNS]
    body = []
    for row in rows:
        key = [row.get("run", "-"), row["scheme"]]
        if row.get("aborted"):
            cells = [*key, *("NaN" for _ in REPORT_COLUMNS)]
        else:
            cells = [*key, *(_fmt(row.get(c)) if c != "epm" else ("-" if row.get(c) is None else f"{row[c]:.2f}") for c in REPORT_COLUMNS)]
        body.append(cells)
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        path = Path(run)
        metrics_path = path / "metrics.json" if path.is_dir() else path
        if not metrics_path.is_file():
            raise CliError(f"no metrics.json in {run}")
        doc = json.loads(metrics_path.read_text(encoding="utf-8"))
        doc.setdefault("scheme", path.name)
        doc["run"] = (path if path.is_dir() else path.parent).resolve().name
        rows.append(doc)
    text = render_report(rows)
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    return 0


# --------------------------------------------------------------------------
# parser


def _client_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated client ids, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgnids", description="Cross-silo federated graph intrusion detection")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text, *, config=True, workers=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        if config:
            p.add_argument("--config", required=True, help="experiment config (YAML)")
            p.add_argument("--out", default=None, help="override the output directory")
        if workers:
            p.add_argument("--workers", type=int, default=None, help="client training threads")
            p.add_argument("--scheme", default=None, help="aggregation scheme override")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset", config=False)
    p.add_argument("--spec", required=True, help="synthetic spec (YAML)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("partition", cmd_partition, "assign nodes to clients")
    p.add_argument("--strategy", choices=("community", "hash", "degree_balanced"), default=None)
    p.add_argument("--output", default=None, help="partition CSV path")

    add("train", cmd_train, "run federated training", workers=True)

    p = add("attack", cmd_attack, "run federated training with a poisoning client", workers=True)
    p.add_argument("--malicious", type=_client_list, default=None, help="comma-separated client ids")
    p.add_argument("--p", type=float, default=None, help="injection likelihood")
    p.add_argument("--gamma", type=float, default=None, help="update scale factor")

    p = add("eval", cmd_eval, "score the test split with a trained model")
    p.add_argument("--model", default=None, help="model path prefix (default <out>/model)")

    p = add("report", cmd_report, "compare runs in one table", config=False)
    p.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    p.add_argument("--output", default=None, help="also write the table here")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DataFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, never dump a traceback on users
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
