"""End-to-end experiment plumbing shared by the CLI and the estimator."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import metrics
from .adversary import AttackConfig, poison_client_data
from .federation import ClientData, FederationConfig, FederationState, run_federation
from .graph import (
    LogEvent,
    PartitionMap,
    Snapshot,
    TemporalGraph,
    WLHistogram,
    augment_one_hop,
    build_graph,
    client_sketch,
    extract_client_graph,
    n_snapshots,
    partition_nodes,
    snapshot_split,
)
from .io import ExperimentConfig, load_edge_csv, read_partition, synth_dataset
from .model import ClientSequence, ModelDims, ModelParams, init_params, negative_sample

logger = logging.getLogger(__name__)

PairKey = tuple[int, int, int]  # (snapshot, low id, high id)


@dataclass
class ClientView:
    k: int
    graph: TemporalGraph
    snapshots: list[Snapshot]
    train_snapshots: list[Snapshot]
    own_nodes: int
    sketch: WLHistogram
    epm: float | None = None
    attack_edges: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class Prepared:
    graph: TemporalGraph
    partition: PartitionMap
    origin: int
    window: int
    T: int
    n_train: int
    n_val: int
    labels: dict[PairKey, int]
    clients: list[ClientView]
    id_map: dict[str, int] | None = None
    blocks: dict[int, int] | None = None

    @property
    def val_steps(self) -> range:
        return range(self.n_train, self.n_train + self.n_val)

    @property
    def test_steps(self) -> range:
        return range(self.n_train + self.n_val, self.T)

    @property
    def epm(self) -> float | None:
        vals = [c.epm for c in self.clients if c.epm is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def attack_pairs(self) -> set[tuple[int, int]]:
        """Unordered endpoint pairs the malicious clients try to hide."""
        return {(min(u, v), max(u, v)) for c in self.clients for u, v in c.attack_edges}

    @property
    def dims_x(self) -> int:
        return self.graph.n_features


def split_counts(T: int, split: Sequence[float]) -> tuple[int, int]:
    """Snapshot counts for (train, validation); the rest is test."""
    n_train = max(1, int(round(split[0] * T)))
    n_val = max(1, int(round(split[1] * T))) if split[1] > 0 else 0
    if n_train + n_val >= T:
        raise ValueError(f"{T} snapshots cannot be split as {tuple(split)} with a non-empty test part")
    return n_train, n_val


def _pair(t: int, u: int, v: int) -> PairKey:
    return (t, min(u, v), max(u, v))


def load_events(cfg: ExperimentConfig) -> tuple[list[LogEvent], dict[str, int] | None, dict[int, int] | None, int | None]:
    """Events, id map, block truth and (for synthetic data) the snapshot count."""
    if cfg.data.source == "synth":
        spec = cfg.data.synth
        if spec.window_seconds != cfg.data.window_seconds:
            raise ValueError("synth.window_seconds must match data.window_seconds")
        graph, blocks = synth_dataset(spec)
        return list(graph.events), None, blocks, spec.T
    events, id_map = load_edge_csv(cfg.resolve(cfg.data.source))
    return events, id_map, None, None


def prepare(
    cfg: ExperimentConfig,
    *,
    events: Sequence[LogEvent] | None = None,
    partition: PartitionMap | None = None,
    count: int | None = None,
    origin: int | None = None,
) -> Prepared:
    id_map = blocks = None
    from_synth = events is None and cfg.data.source == "synth"
    if events is None:
        events, id_map, blocks, count = load_events(cfg)
        if count is not None:
            origin = 0
    events = sorted(events, key=lambda e: e.timestamp)
    w = cfg.data.window_seconds
    origin = events[0].timestamp if origin is None else origin
    T = count if count is not None else n_snapshots(events[-1].timestamp - origin, w)
    n_train, n_val = split_counts(T, cfg.data.split)
    if from_synth and cfg.data.synth.anomaly_count and cfg.data.synth.window[0] < n_train + n_val:
        raise ValueError(
            f"anomaly window {cfg.data.synth.window} starts before the test split at snapshot {n_train + n_val}"
        )
    train_end = origin + n_train * w

    labels: dict[PairKey, int] = {}
    for e in events:
        key = _pair((e.timestamp - origin) // w, e.src, e.dst)
        labels[key] = max(labels.get(key, 0), e.label)

    universe = sorted({e.src for e in events} | {e.dst for e in events})
    if cfg.data.clean_training:
        dropped = sum(1 for e in events if e.label == 1 and e.timestamp < train_end)
        if dropped:
            logger.info("dropping %d labelled events from the training period", dropped)
        events = [e for e in events if not (e.label == 1 and e.timestamp < train_end)]
    graph = build_graph(events, cfg.model.feature_mode, universe=universe)

    if partition is None:
        if cfg.data.partition is not None:
            partition = read_partition(cfg.resolve(cfg.data.partition), id_map)
        else:
            partition = partition_nodes(graph, cfg.federation.K, cfg.data.partition_strategy, cfg.seeds.partition)
    if partition.K != cfg.federation.K:
        raise ValueError(f"partition has {partition.K} clients, federation.K is {cfg.federation.K}")

    attack = cfg.attack
    sizes = partition.sizes()
    clients = []
    for k in range(1, partition.K + 1):
        cg = extract_client_graph(graph, partition, k, cross_client=cfg.data.augment)
        if cfg.data.augment:
            cg = augment_one_hop(cg, partition, k)
        snaps = snapshot_split(cg, w, origin=origin, count=T)
        train_events = [e for e in cg.events if e.timestamp < train_end]
        sketch_graph = TemporalGraph(cg.node_list, tuple(train_events or cg.events), cg.features, cg.feature_mode)
        view = ClientView(k, cg, snaps, snaps[:n_train], sizes[k], client_sketch(sketch_graph, cfg.federation.wl_iters))
        if attack is not None and k in attack.malicious_clients:
            test_start = n_train + n_val
            em = sorted(
                {(e.src, e.dst) for e in cg.events if e.label == 1 and (e.timestamp - origin) // w >= test_start}
            )
            seed = int(np.random.SeedSequence([attack.seed, k]).generate_state(1)[0])
            view.train_snapshots, view.epm = poison_client_data(view.train_snapshots, em, attack.p, seed)
            view.attack_edges = em
        clients.append(view)

    return Prepared(graph, partition, origin, w, T, n_train, n_val, labels, clients, id_map, blocks)


def model_dims(cfg: ExperimentConfig, prep: Prepared) -> ModelDims:
    return ModelDims(prep.dims_x, cfg.model.d_h, cfg.model.d_z)


def _sequence(cfg: ExperimentConfig, view: ClientView, snaps: Sequence[Snapshot]) -> ClientSequence:
    return ClientSequence(
        snaps, view.graph.node_list, view.graph.features, neg_ratio=cfg.model.neg_ratio, offset=cfg.model.offset
    )


def federation_clients(cfg: ExperimentConfig, prep: Prepared) -> list[ClientData]:
    out = []
    for view in prep.clients:
        train = _sequence(cfg, view, view.train_snapshots)
        val = None
        if prep.n_val:
            seq = _sequence(cfg, view, view.snapshots[: prep.n_train + prep.n_val])
            val_seed = int(np.random.SeedSequence([cfg.seeds.sampling, 97, view.k]).generate_state(1)[0])
            val = seq.make_batch(val_seed, targets=prep.val_steps)
        out.append(ClientData(view.k, train, view.sketch, view.own_nodes, val))
    return out


@dataclass
class TrainResult:
    params: ModelParams
    state: FederationState
    weight_log: list[dict]
    epm: float | None = None
    s_jac: list[float] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.state.aborted


def train(cfg: ExperimentConfig, prep: Prepared, *, fed: FederationConfig | None = None) -> TrainResult:
    fed = fed or cfg.federation
    dims = model_dims(cfg, prep)
    clients = federation_clients(cfg, prep)
    init = init_params(dims, cfg.seeds.init)
    params, state, log = run_federation(
        fed, clients, dims, total_nodes=len(prep.graph.node_list), attack=cfg.attack, init=init
    )
    s_jac = [state.weights[c.k].s_jac for c in clients]
    return TrainResult(params, state, log, prep.epm, s_jac)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    metrics: dict
    validation: metrics.ScoredEdges
    test: metrics.ScoredEdges
    test_keys: list[PairKey]
    tau: float
    degenerate_threshold: bool

    def pr_points(self) -> list[tuple[float, float, float]]:
        thr, prec, rec = metrics.pr_curve(self.test)
        return list(zip(thr.tolist(), prec.tolist(), rec.tolist()))


def _score_views(cfg: ExperimentConfig, params: ModelParams, prep: Prepared, views: Sequence[tuple[int, TemporalGraph, list[Snapshot]]]):
    """Fused test scores (max over observers) and validation scores."""
    off = cfg.model.offset
    test: dict[PairKey, float] = {}
    val_scores: list[float] = []
    val_labels: list[int] = []
    for k, g, snaps in views:
        seq = ClientSequence(snaps, g.node_list, g.features, offset=off)
        Zs = seq.embeddings(params)
        for t in list(prep.val_steps) + list(prep.test_steps):
            if t - off < 0:
                continue
            Z = Zs[t - off]
            snap = snaps[t]
            pairs = sorted(snap.undirected_pairs())
            if not pairs:
                continue
            probs = expit(np.einsum("ij,ij->i", Z[seq.to_index(pairs)[:, 0]], Z[seq.to_index(pairs)[:, 1]]))
            if t in prep.val_steps:
                val_scores += (1.0 - probs).tolist()
                val_labels += [prep.labels.get((t, u, v), 0) for u, v in pairs]
                if len(snap.nodes) >= 2:
                    seed = int(np.random.SeedSequence([cfg.seeds.sampling, 101, k, t]).generate_state(1)[0])
                    try:
                        fake = negative_sample(snap, 1.0, seed)
                    except ValueError:
                        fake = []
                    if fake:
                        idx = seq.to_index(fake)
                        fp = expit(np.einsum("ij,ij->i", Z[idx[:, 0]], Z[idx[:, 1]]))
                        val_scores += (1.0 - fp).tolist()
                        val_labels += [1] * len(fake)
            else:
                for (u, v), p in zip(pairs, probs):
                    key = (t, u, v)
                    test[key] = max(test.get(key, -np.inf), 1.0 - float(p))
    return test, val_scores, val_labels


def learn_threshold(cfg: ExperimentConfig, validation: metrics.ScoredEdges) -> metrics.Threshold:
    if cfg.eval.objective == "f1":
        return metrics.select_threshold(validation, "f1")
    return metrics.select_threshold(validation, ("fpr_target", cfg.eval.fpr_target))


def validation_threshold(cfg: ExperimentConfig, params: ModelParams, prep: Prepared) -> metrics.Threshold:
    """Threshold learnt on the validation snapshots of the client views."""
    views = [(c.k, c.graph, c.snapshots) for c in prep.clients]
    _, val_scores, val_labels = _score_views(cfg, params, prep, views)
    return learn_threshold(cfg, metrics.ScoredEdges(np.array(val_scores), np.array(val_labels, dtype=int)))


def evaluate(cfg: ExperimentConfig, params: ModelParams, prep: Prepared) -> EvalResult:
    """Score validation and test snapshots with the global model.

    In the ``client`` view every client scores the edges it observes and an
    edge seen by several clients keeps its highest anomaly score.  The
    ``global`` view scores the whole graph at once.
    """
    if cfg.eval.view == "client":
        views = [(c.k, c.graph, c.snapshots) for c in prep.clients]
    else:
        snaps = snapshot_split(prep.graph, prep.window, origin=prep.origin, count=prep.T)
        views = [(0, prep.graph, snaps)]
    test, val_scores, val_labels = _score_views(cfg, params, prep, views)

    validation = metrics.ScoredEdges(np.array(val_scores), np.array(val_labels, dtype=int))
    thr = learn_threshold(cfg, validation)

    keys = sorted(test)
    scores = np.array([test[k] for k in keys])
    labels = np.array([prep.labels.get(k, 0) for k in keys], dtype=int)
    scored = metrics.ScoredEdges(scores, labels)
    targets = prep.attack_pairs
    if cfg.attack is not None:
        # success is measured on the edges the attacker replayed
        hidden = np.array([labels[i] == 1 and (k[1], k[2]) in targets for i, k in enumerate(keys)], dtype=bool)
        mal = scores[hidden]
    else:
        mal = scores[labels == 1]
    sr = metrics.attack_success_rate(mal, thr.tau) if len(mal) else None
    doc = metrics.report(scored, thr.tau, sr=sr, epm=prep.epm)
    doc["n_test_edges"] = int(len(keys))
    doc["n_malicious"] = int(labels.sum())
    doc["base_rate"] = float(labels.mean())
    return EvalResult(doc, validation, scored, keys, thr.tau, thr.degenerate)


# --------------------------------------------------------------------------
# artefacts


def write_weight_log(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("iteration", "client", "r", "s_jac", "s", "d"))
        for row in rows:
            writer.writerow((row["iteration"], row["client"], repr(row["r"]), repr(row["s_jac"]), repr(row["s"]), repr(row["d"])))


def read_weight_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            {"iteration": int(r["iteration"]), "client": int(r["client"]), **{k: float(r[k]) for k in ("r", "s_jac", "s", "d")}}
            for r in csv.DictReader(fh)
        ]


def write_pr_curve(path: str | Path, points: Sequence[tuple[float, float, float]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("threshold", "precision", "recall"))
        for thr, p, r in points:
            writer.writerow((repr(thr), repr(p), repr(r)))


def history_doc(cfg: ExperimentConfig, result: TrainResult) -> dict:
    config = cfg.to_dict()
    # where the run was written and how many threads it used do not change it
    del config["output_dir"], config["federation"]["workers"]
    return {
        "scheme": cfg.federation.scheme,
        "iterations_run": len(result.state.history),
        "aborted": result.state.aborted,
        "diagnosis": result.state.diagnosis,
        "s_jac": result.s_jac,
        "epm": result.epm,
        "history": result.state.history,
        "config": config,
    }
