"""Edge CSV and partition files, synthetic datasets, experiment configs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .adversary import AttackConfig
from .federation import FederationConfig
from .graph import LogEvent, PartitionMap, TemporalGraph, build_graph

EDGE_HEADER = ("src", "dst", "timestamp", "label")
PARTITION_HEADER = ("node_id", "client_id")


class DataFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# edge CSV


def load_edge_csv(path: str | Path, id_map: dict[str, int] | None = None) -> tuple[list[LogEvent], dict[str, int]]:
    """Read ``src,dst,timestamp,label`` rows.

    Node names are interned to dense integers in order of first appearance,
    continuing from ``id_map`` when one is given.  Returns the events and the
    (possibly extended) id map.
    """
    path = Path(path)
    id_map = dict(id_map or {})
    events = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EDGE_HEADER:
            raise DataFormatError(f"{path}: header must be {','.join(EDGE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            src, dst, ts, label = (c.strip() for c in row)
            try:
                ts_i = int(ts)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            if label not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: label {label!r} not in {{0,1}}")
            if ts_i < 0:
                raise DataFormatError(f"{path}:{lineno}: negative timestamp")
            for name in (src, dst):
                if name not in id_map:
                    id_map[name] = len(id_map)
            events.append(LogEvent(id_map[src], id_map[dst], ts_i, int(label)))
    return events, id_map


def write_edge_csv(path: str | Path, events: Sequence[LogEvent], names: Mapping[int, str] | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EDGE_HEADER)
        for e in events:
            src = names[e.src] if names else e.src
            dst = names[e.dst] if names else e.dst
            writer.writerow((src, dst, e.timestamp, e.label))


def write_id_map(path: str | Path, id_map: Mapping[str, int]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("name", "node_id"))
        for name, idx in sorted(id_map.items(), key=lambda kv: kv[1]):
            writer.writerow((name, idx))


def read_id_map(path: str | Path) -> dict[str, int]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["name"]: int(r["node_id"]) for r in rows}


def parse_lanl_auth(lines: Sequence[str]) -> list[tuple[str, str, int]]:
    """Keep ``NTLM`` rows of a comma-separated auth log as ``(src, dst, time)``.

    Expected row shape: ``<keyword>,<src>,<dst>,<time>``; rows whose
    keyword is not ``NTLM`` are skipped.
    """
    out = []
    for line in lines:
        parts = [p.strip() for p in line.strip().split(",")]
        if len(parts) < 4 or parts[0] != "NTLM":
            continue
        out.append((parts[1], parts[2], int(parts[3])))
    return out


# --------------------------------------------------------------------------
# partition CSV


def write_partition(path: str | Path, pm: PartitionMap, names: Mapping[int, str] | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PARTITION_HEADER)
        for node in sorted(pm.assignment):
            writer.writerow((names[node] if names else node, pm.assignment[node]))


def read_partition(path: str | Path, id_map: Mapping[str, int] | None = None) -> PartitionMap:
    path = Path(path)
    assignment = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PARTITION_HEADER:
            raise DataFormatError(f"{path}: header must be {','.join(PARTITION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 columns")
            name, client = row[0].strip(), row[1].strip()
            try:
                node = id_map[name] if id_map is not None else int(name)
                k = int(client)
            except (KeyError, ValueError):
                raise DataFormatError(f"{path}:{lineno}: bad row {row}") from None
            assignment[node] = k
    if not assignment:
        raise DataFormatError(f"{path}: no rows")
    return PartitionMap(assignment, max(assignment.values()))


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Stochastic block model over time with planted cross-block anomalies.

    ``anomaly_window`` is a half-open range of snapshot indices; ``None``
    means the last 15% of snapshots.
    """

    n_nodes: int = 200
    K_blocks: int = 4
    T: int = 20
    p_intra: float = 0.1
    p_inter: float = 0.002
    anomaly_count: int = 40
    anomaly_window: tuple[int, int] | None = None
    window_seconds: int = 1800
    seed: int = 0

    def __post_init__(self):
        for name in ("p_intra", "p_inter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.K_blocks < 1 or self.n_nodes < self.K_blocks:
            raise ValueError("need at least one node per block")
        if self.T < 1 or self.window_seconds < 1:
            raise ValueError("T and window_seconds must be positive")
        lo, hi = self.window
        if not 0 <= lo < hi <= self.T:
            raise ValueError(f"anomaly window {self.anomaly_window} outside [0, {self.T})")

    @property
    def window(self) -> tuple[int, int]:
        if self.anomaly_window is not None:
            return tuple(self.anomaly_window)
        return (self.T - max(1, int(round(0.15 * self.T))), self.T)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SynthSpec":
        doc = dict(doc)
        if doc.get("anomaly_window") is not None:
            doc["anomaly_window"] = tuple(doc["anomaly_window"])
        return cls(**_known(cls, doc, "synth"))


def synth_blocks(spec: SynthSpec) -> dict[int, int]:
    sizes = np.full(spec.K_blocks, spec.n_nodes // spec.K_blocks)
    sizes[: spec.n_nodes % spec.K_blocks] += 1
    return {v: int(b) for v, b in enumerate(np.repeat(np.arange(spec.K_blocks), sizes))}


def synth_dataset(spec: SynthSpec) -> tuple[TemporalGraph, dict[int, int]]:
    """Generate events and return them as a graph plus node -> block labels.

    Every snapshot samples each intra-block pair with ``p_intra`` and each
    inter-block pair with ``p_inter``, one event per sampled pair at a
    uniform time inside the window.  Then ``anomaly_count`` cross-block pairs
    that never communicate are planted (label 1), each in a random snapshot
    of the anomaly window.
    """
    rng = np.random.default_rng(spec.seed)
    blocks = synth_blocks(spec)
    n = spec.n_nodes
    b = np.array([blocks[v] for v in range(n)])
    iu, ju = np.triu_indices(n, k=1)
    same = b[iu] == b[ju]
    prob = np.where(same, spec.p_intra, spec.p_inter)

    events: list[LogEvent] = []
    seen = np.zeros(len(iu), dtype=bool)
    w = spec.window_seconds
    for t in range(spec.T):
        hit = rng.random(len(iu)) < prob
        seen |= hit
        idx = np.nonzero(hit)[0]
        flip = rng.random(len(idx)) < 0.5
        ts = t * w + rng.integers(0, w, size=len(idx))
        for k, f, s in zip(idx, flip, ts):
            u, v = int(iu[k]), int(ju[k])
            if f:
                u, v = v, u
            events.append(LogEvent(u, v, int(s), 0))

    if spec.anomaly_count:
        free = np.nonzero(~same & ~seen)[0]
        if len(free) < spec.anomaly_count:
            raise ValueError(
                f"only {len(free)} never-communicating cross-block pairs for {spec.anomaly_count} anomalies"
            )
        chosen = rng.choice(free, size=spec.anomaly_count, replace=False)
        lo, hi = spec.window
        for k in chosen:
            t = int(rng.integers(lo, hi))
            u, v = int(iu[k]), int(ju[k])
            if rng.random() < 0.5:
                u, v = v, u
            events.append(LogEvent(u, v, t * w + int(rng.integers(0, w)), 1))

    if not events:
        raise ValueError("synthetic spec produced no events")
    return build_graph(events, "degree"), blocks


# --------------------------------------------------------------------------
# experiment config


def _known(cls, doc: Mapping[str, Any], section: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return dict(doc)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    synth: SynthSpec = field(default_factory=SynthSpec)
    partition: str | None = None
    partition_strategy: str = "community"
    window_seconds: int = 1800
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    clean_training: bool = True
    augment: bool = True

    def __post_init__(self):
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 16
    d_z: int = 8
    feature_mode: str = "identity"
    neg_ratio: float = 1.0
    offset: int = 0


@dataclass(frozen=True)
class EvalConfig:
    view: str = "client"
    objective: str = "f1"
    fpr_target: float = 0.01

    def __post_init__(self):
        if self.view not in ("client", "global"):
            raise ValueError("eval view must be 'client' or 'global'")
        if self.objective not in ("f1", "fpr_target"):
            raise ValueError("eval objective must be 'f1' or 'fpr_target'")
        if not 0.0 <= self.fpr_target <= 1.0:
            raise ValueError(f"fpr_target={self.fpr_target} outside [0, 1]")


SEED_NAMES = ("data", "partition", "init", "sampling", "dp", "attack")


@dataclass(frozen=True)
class Seeds:
    """Independent seeds per source of randomness, derived from ``base``."""

    base: int = 0
    overrides: Mapping[str, int] = field(default_factory=dict)

    def __getattr__(self, name: str) -> int:
        if name not in SEED_NAMES:
            raise AttributeError(name)
        if name in self.overrides:
            return int(self.overrides[name])
        return int(np.random.SeedSequence([self.base, SEED_NAMES.index(name)]).generate_state(1)[0])

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in SEED_NAMES}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackConfig | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"
    base_dir: str = "."

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        synth = asdict(self.data.synth)
        data = asdict(self.data)
        data["synth"] = synth
        return {
            "data": data,
            "model": asdict(self.model),
            "federation": asdict(self.federation),
            "attack": None
            if self.attack is None
            else {
                "malicious_clients": sorted(self.attack.malicious_clients),
                "p": self.attack.p,
                "gamma": self.attack.gamma,
                "seed": self.attack.seed,
            },
            "eval": asdict(self.eval),
            "seeds": self.seeds.as_dict(),
            "output_dir": self.output_dir,
        }


def experiment_from_dict(doc: Mapping[str, Any], base_dir: str | Path = ".") -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = set(doc) - {"data", "model", "federation", "attack", "eval", "seeds", "output_dir"}
    if unknown:
        raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
    seeds_doc = dict(doc.get("seeds") or {})
    base = int(seeds_doc.pop("base", 0))
    bad = set(seeds_doc) - set(SEED_NAMES)
    if bad:
        raise ValueError(f"unknown seed names: {sorted(bad)}")
    seeds = Seeds(base, {k: int(v) for k, v in seeds_doc.items()})

    data_doc = dict(doc.get("data") or {})
    synth_doc = dict(data_doc.pop("synth", None) or {})
    synth_doc.setdefault("seed", seeds.data)
    synth = SynthSpec.from_dict(synth_doc)
    if "split" in data_doc:
        data_doc["split"] = tuple(data_doc["split"])
    data = DataConfig(synth=synth, **_known(DataConfig, data_doc, "data"))

    fed_doc = _known(FederationConfig, dict(doc.get("federation") or {}), "federation")
    fed_doc.setdefault("seed", seeds.sampling)
    fed_doc.setdefault("dp_seed", seeds.dp)
    federation = FederationConfig(**fed_doc)

    attack = None
    if doc.get("attack"):
        a = dict(doc["attack"])
        a.setdefault("seed", seeds.attack)
        a["malicious_clients"] = frozenset(a.get("malicious_clients", []))
        attack = AttackConfig(**_known(AttackConfig, a, "attack"))
        attack.validate(federation.K)

    return ExperimentConfig(
        data=data,
        model=ModelConfig(**_known(ModelConfig, dict(doc.get("model") or {}), "model")),
        federation=federation,
        attack=attack,
        eval=EvalConfig(**_known(EvalConfig, dict(doc.get("eval") or {}), "eval")),
        seeds=seeds,
        output_dir=str(doc.get("output_dir", "runs/default")),
        base_dir=str(base_dir),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    return experiment_from_dict(doc or {}, base_dir=path.parent)


def load_synth_spec(path: str | Path) -> SynthSpec:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return SynthSpec.from_dict(doc.get("synth", doc))


def dump_json(path: str | Path, doc: Any) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
