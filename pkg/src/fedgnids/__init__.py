"""Federated graph-based intrusion detection with contribution-scaled aggregation."""

from .adversary import AttackConfig, poison_client_data, scale_update
from .estimator import EdgeAnomalyDetector
from .federation import FederationConfig, aggregate, run_federation
from .graph import LogEvent, PartitionMap, Snapshot, TemporalGraph, build_graph, snapshot_split
from .io import ExperimentConfig, SynthSpec, load_config, synth_dataset
from .model import ModelDims, ModelParams, init_params, local_train, loss_and_grad

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "EdgeAnomalyDetector",
    "ExperimentConfig",
    "FederationConfig",
    "LogEvent",
    "ModelDims",
    "ModelParams",
    "PartitionMap",
    "Snapshot",
    "SynthSpec",
    "TemporalGraph",
    "aggregate",
    "build_graph",
    "init_params",
    "load_config",
    "local_train",
    "loss_and_grad",
    "poison_client_data",
    "run_federation",
    "scale_update",
    "snapshot_split",
    "synth_dataset",
]
