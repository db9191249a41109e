"""scikit-learn style wrapper around the federated pipeline.

Rows of ``X`` are log events ``(src, dst, timestamp)`` with integer node ids;
``y`` (optional) marks known-malicious events, which are dropped from the
training period and otherwise only used by :meth:`score`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils import check_array, check_consistent_length
from sklearn.utils.validation import check_is_fitted

from . import metrics, pipeline
from .federation import FederationConfig
from .graph import LogEvent, build_graph, n_snapshots, snapshot_split
from .io import DataConfig, EvalConfig, ExperimentConfig, ModelConfig, Seeds
from .model import ClientSequence


def check_events(X, y=None) -> list[LogEvent]:
    """Validate an event table and return it as :class:`LogEvent` rows."""
    if len(X) and isinstance(X[0], LogEvent):
        events = list(X)
        if y is not None:
            check_consistent_length(events, y)
            events = [LogEvent(e.src, e.dst, e.timestamp, int(lab)) for e, lab in zip(events, y)]
        return events
    arr = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if arr.shape[1] not in (3, 4):
        raise ValueError(f"expected columns (src, dst, timestamp[, label]), got {arr.shape[1]} columns")
    labels = arr[:, 3] if arr.shape[1] == 4 else np.zeros(len(arr), dtype=np.int64)
    if y is not None:
        y = np.asarray(y)
        check_consistent_length(arr, y)
        labels = y.astype(np.int64)
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    return [LogEvent(int(s), int(d), int(t), int(lab)) for (s, d, t), lab in zip(arr[:, :3], labels)]


class EdgeAnomalyDetector(BaseEstimator):
    """Federated GCN+GRU edge anomaly detector.

    ``fit`` partitions the nodes into ``n_clients`` silos, trains one global
    model with the chosen aggregation ``scheme`` and learns an alert
    threshold on the validation snapshots.  Higher ``decision_function``
    values are more anomalous.
    """

    def __init__(
        self,
        scheme: str = "entente",
        n_clients: int = 4,
        max_rounds: int = 30,
        local_epochs: int = 1,
        learning_rate: float = 0.01,
        hidden_dim: int = 16,
        embed_dim: int = 8,
        window_seconds: int = 1800,
        offset: int = 0,
        partition_strategy: str = "community",
        c1: float = 0.8,
        c2: float = 0.2,
        omega: float = 5.0,
        norm_bound: float = 5.0,
        split: Sequence[float] = (0.7, 0.15, 0.15),
        threshold_objective: str = "f1",
        fpr_target: float = 0.01,
        random_state: int = 0,
        n_workers: int = 1,
    ):
        self.scheme = scheme
        self.n_clients = n_clients
        self.max_rounds = max_rounds
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.window_seconds = window_seconds
        self.offset = offset
        self.partition_strategy = partition_strategy
        self.c1 = c1
        self.c2 = c2
        self.omega = omega
        self.norm_bound = norm_bound
        self.split = split
        self.threshold_objective = threshold_objective
        self.fpr_target = fpr_target
        self.random_state = random_state
        self.n_workers = n_workers

    def _config(self) -> ExperimentConfig:
        seeds = Seeds(int(self.random_state))
        fed = FederationConfig(
            K=self.n_clients,
            R=self.max_rounds,
            E=self.local_epochs,
            eta=self.learning_rate,
            c1=self.c1,
            c2=self.c2,
            omega=self.omega,
            M=self.norm_bound,
            scheme=self.scheme,
            workers=self.n_workers,
            seed=seeds.sampling,
            dp_seed=seeds.dp,
        )
        return ExperimentConfig(
            data=DataConfig(
                source="events",
                partition_strategy=self.partition_strategy,
                window_seconds=self.window_seconds,
                split=tuple(self.split),
            ),
            model=ModelConfig(d_h=self.hidden_dim, d_z=self.embed_dim, offset=self.offset),
            federation=fed,
            eval=EvalConfig(objective=self.threshold_objective, fpr_target=self.fpr_target),
            seeds=seeds,
        )

    def fit(self, X, y=None):
        events = check_events(X, y)
        cfg = self._config()
        prep = pipeline.prepare(cfg, events=events)
        result = pipeline.train(cfg, prep)
        thr = pipeline.validation_threshold(cfg, result.params, prep)
        self.params_ = result.params
        self.threshold_ = thr.tau
        self.history_ = result.state.history
        self.diverged_ = result.diverged
        self.universe_ = list(prep.graph.node_list)
        self.origin_ = prep.origin
        self.events_ = events
        self.n_features_in_ = 3
        return self

    def decision_function(self, X) -> np.ndarray:
        """Anomaly score (1 minus edge probability) of every row of ``X``.

        Each row is scored in its own snapshot, with the fitted events as
        history for the recurrent state.
        """
        check_is_fitted(self, "params_")
        rows = check_events(X)
        if min(e.timestamp for e in rows) < self.origin_:
            raise ValueError("events before the fitted time origin cannot be scored")
        merged = list(dict.fromkeys([*self.events_, *(LogEvent(e.src, e.dst, e.timestamp, 0) for e in rows)]))
        graph = build_graph(merged, "identity", universe=self.universe_)
        w = self.window_seconds
        T = n_snapshots(max(e.timestamp for e in merged) - self.origin_, w)
        snaps = snapshot_split(graph, w, origin=self.origin_, count=T)
        seq = ClientSequence(snaps, graph.node_list, graph.features, offset=self.offset)
        Zs = seq.embeddings(self.params_)
        out = np.empty(len(rows))
        for i, e in enumerate(rows):
            t = (e.timestamp - self.origin_) // w
            if t - self.offset < 0:
                out[i] = np.nan
                continue
            Z = Zs[t - self.offset]
            (a, b), = seq.to_index([(e.src, e.dst)])
            out[i] = 1.0 - float(expit(Z[a] @ Z[b]))
        return out

    def predict(self, X) -> np.ndarray:
        """1 for events flagged as anomalous at the learnt threshold."""
        return (self.decision_function(X) >= self.threshold_).astype(int)

    def score(self, X, y) -> float:
        """Average precision of the anomaly scores against ``y``."""
        scores = self.decision_function(X)
        y = np.asarray(y, dtype=int)
        check_consistent_length(scores, y)
        keep = ~np.isnan(scores)
        return metrics.average_precision(metrics.ScoredEdges(scores[keep], y[keep]))
