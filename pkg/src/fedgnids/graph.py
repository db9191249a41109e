"""Log-event graphs: construction, snapshots, client views and WL sketches.

Everything here is a pure function of its inputs (and an explicit seed).
Node ids are plain integers; use :func:`fedgnids.io.load_edge_csv` to intern
arbitrary string ids first.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MODES = ("degree", "role", "identity")
PARTITION_STRATEGIES = ("hash", "degree_balanced", "community")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``.

    Used wherever a label or id must hash identically on every platform and
    run (Python's builtin ``hash`` is salted per process).  For ``N`` distinct
    inputs the collision probability is about ``N**2 / 2**65``.
    """
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class LogEvent:
    src: int
    dst: int
    timestamp: int
    label: int = 0

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def is_self_loop(self) -> bool:
        return self.src == self.dst


@dataclass(frozen=True)
class TemporalGraph:
    """Time-sorted events plus per-node feature vectors.

    ``features`` is a dense ``(len(node_list), d_x)`` matrix whose row order is
    ``node_list`` (sorted ids).  ``foreign`` holds nodes flagged by
    :func:`augment_one_hop`.
    """

    node_list: tuple[int, ...]
    events: tuple[LogEvent, ...]
    features: np.ndarray
    feature_mode: str = "degree"
    foreign: frozenset[int] = frozenset()
    has_self_loops: bool = False

    @property
    def nodes(self) -> frozenset[int]:
        return frozenset(self.node_list)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def node_index(self) -> dict[int, int]:
        return {v: i for i, v in enumerate(self.node_list)}

    def feature(self, node: int) -> np.ndarray:
        return self.features[self.node_index()[node]]

    @property
    def node_features(self) -> dict[int, np.ndarray]:
        return {v: self.features[i] for i, v in enumerate(self.node_list)}

    @property
    def time_span(self) -> tuple[int, int]:
        return self.events[0].timestamp, self.events[-1].timestamp


@dataclass(frozen=True)
class Snapshot:
    """Events of one time window merged into weighted directed edges."""

    index: int
    nodes: frozenset[int]
    edges: Mapping[tuple[int, int], float]
    window: tuple[int, int]

    def __post_init__(self):
        for (u, v), w in self.edges.items():
            if u not in self.nodes or v not in self.nodes:
                raise ValueError(f"edge ({u}, {v}) has an endpoint outside the snapshot")
            if w < 1:
                raise ValueError(f"edge ({u}, {v}) has weight {w} < 1")

    @property
    def n_events(self) -> float:
        return float(sum(self.edges.values()))

    def undirected_pairs(self) -> set[tuple[int, int]]:
        return {(min(u, v), max(u, v)) for u, v in self.edges}

    def with_edges(self, extra: Iterable[tuple[int, int]], weight: float = 1.0) -> "Snapshot":
        edges = dict(self.edges)
        for e in extra:
            edges[e] = edges.get(e, 0.0) + weight
        return Snapshot(self.index, self.nodes, edges, self.window)


@dataclass(frozen=True)
class PartitionMap:
    assignment: Mapping[int, int]
    K: int

    def __post_init__(self):
        used = set(self.assignment.values())
        missing = set(range(1, self.K + 1)) - used
        if missing:
            raise ValueError(f"clients {sorted(missing)} have no nodes")
        if not used <= set(range(1, self.K + 1)):
            raise ValueError(f"client ids outside [1, {self.K}]: {sorted(used)}")

    def client_of(self, node: int) -> int | None:
        return self.assignment.get(node)

    def members(self, k: int) -> set[int]:
        return {v for v, c in self.assignment.items() if c == k}

    def sizes(self) -> dict[int, int]:
        counts = Counter(self.assignment.values())
        return {k: counts.get(k, 0) for k in range(1, self.K + 1)}


@dataclass(frozen=True)
class StaticGraph:
    """Simple undirected graph on nodes ``0..n-1``; edges stored as ``u < v``."""

    n: int
    adjacency: frozenset[tuple[int, int]]

    def __post_init__(self):
        for u, v in self.adjacency:
            if not (0 <= u < v < self.n):
                raise ValueError(f"bad edge ({u}, {v}) for n={self.n}")

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.adjacency:
            nbrs[u].append(v)
            nbrs[v].append(u)
        return nbrs

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for u, v in self.adjacency:
            deg[u] += 1
            deg[v] += 1
        return deg

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        nbrs = self.neighbors()
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n


@dataclass(frozen=True)
class WLHistogram:
    per_iteration: tuple[Counter, ...] = field(default_factory=tuple)

    @property
    def max_iters(self) -> int:
        return len(self.per_iteration) - 1


# --------------------------------------------------------------------------
# construction


def _degree_features(node_list: Sequence[int], events: Sequence[LogEvent]) -> np.ndarray:
    nbrs: dict[int, set[int]] = defaultdict(set)
    for e in events:
        if not e.is_self_loop:
            nbrs[e.src].add(e.dst)
            nbrs[e.dst].add(e.src)
    deg = np.array([len(nbrs[v]) for v in node_list], dtype=float)
    return np.column_stack([np.ones(len(node_list)), np.log1p(deg)])


def _role_features(node_list: Sequence[int], roles: Mapping[int, int]) -> np.ndarray:
    n_roles = max(roles.values()) + 1 if roles else 1
    feats = np.zeros((len(node_list), n_roles))
    for i, v in enumerate(node_list):
        if v in roles:
            feats[i, roles[v]] = 1.0
    return feats


def default_feature(mode: str, d_x: int) -> np.ndarray:
    """Feature vector given to nodes whose attributes a client cannot see."""
    vec = np.zeros(d_x)
    if mode == "degree":
        vec[0] = 1.0
    return vec


def build_graph(
    events: Sequence[LogEvent],
    feature_mode: str = "degree",
    *,
    roles: Mapping[int, int] | None = None,
    universe: Sequence[int] | None = None,
) -> TemporalGraph:
    """Assemble a :class:`TemporalGraph` from raw events.

    ``feature_mode`` is one of

    * ``"degree"``: ``[1, log(1 + degree)]`` per node;
    * ``"role"``: one-hot of ``roles[node]`` (falls back to ``"degree"`` when
      no roles are given);
    * ``"identity"``: one-hot of the node's position in ``universe`` (default:
      the sorted node set; nodes outside it get a zero row).  Clients must
      share ``universe`` so that first-layer weights line up across the
      federation.

    Self-loops are kept and reported through ``has_self_loops``.
    """
    if not events:
        raise ValueError("empty event stream")
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature_mode {feature_mode!r}; expected one of {FEATURE_MODES}")
    ordered = tuple(sorted(events, key=lambda e: e.timestamp))
    node_list = tuple(sorted({e.src for e in ordered} | {e.dst for e in ordered}))
    self_loops = any(e.is_self_loop for e in ordered)
    if self_loops:
        logger.warning("event stream contains self-loops; they are kept")

    if feature_mode == "role" and not roles:
        feature_mode = "degree"
    if feature_mode == "degree":
        feats = _degree_features(node_list, ordered)
    elif feature_mode == "role":
        feats = _role_features(node_list, roles)
    else:
        uni = list(universe) if universe is not None else list(node_list)
        pos = {v: i for i, v in enumerate(uni)}
        feats = np.zeros((len(node_list), len(uni)))
        # nodes outside the universe keep an all-zero row
        rows = [(i, pos[v]) for i, v in enumerate(node_list) if v in pos]
        if rows:
            r, c = zip(*rows)
            feats[list(r), list(c)] = 1.0
    return TemporalGraph(node_list, ordered, feats, feature_mode, frozenset(), self_loops)


def n_snapshots(span: int, window_seconds: int) -> int:
    return span // window_seconds + 1


def snapshot_split(
    graph: TemporalGraph,
    window_seconds: int,
    *,
    origin: int | None = None,
    count: int | None = None,
) -> list[Snapshot]:
    """Cut ``graph`` into consecutive ``[start, end)`` windows.

    Window ``t`` covers ``[origin + t*w, origin + (t+1)*w)``.  ``origin``
    defaults to the first event time and ``count`` to the number of windows
    needed to reach the last event; pass both explicitly to align the
    snapshots of several client graphs.  Empty windows are kept.
    """
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    first, last = graph.time_span
    origin = first if origin is None else origin
    if first < origin:
        raise ValueError(f"event at {first} precedes origin {origin}")
    if count is None:
        count = n_snapshots(last - origin, window_seconds)

    buckets: list[dict[tuple[int, int], float]] = [defaultdict(float) for _ in range(count)]
    for e in graph.events:
        t = (e.timestamp - origin) // window_seconds
        if t >= count:
            raise ValueError(f"event at {e.timestamp} falls beyond snapshot {count - 1}")
        buckets[t][(e.src, e.dst)] += 1.0

    snaps = []
    for t, edges in enumerate(buckets):
        nodes = frozenset(v for uv in edges for v in uv)
        start = origin + t * window_seconds
        snaps.append(Snapshot(t, nodes, dict(edges), (start, start + window_seconds)))
    return snaps


# --------------------------------------------------------------------------
# client partitioning


def _repair_empty(groups: dict[int, list[int]], K: int, key) -> None:
    """Move nodes from the largest groups into empty ones, deterministically."""
    for k in range(1, K + 1):
        if groups[k]:
            continue
        donor = max(range(1, K + 1), key=lambda c: (len(groups[c]), -c))
        node = max(groups[donor], key=key)
        groups[donor].remove(node)
        groups[k].append(node)


def _label_propagation(nodes: Sequence[int], nbrs: Mapping[int, Counter], rng: np.random.Generator) -> dict[int, int]:
    labels = {v: v for v in nodes}
    order = list(nodes)
    for _ in range(100):
        rng.shuffle(order)
        changed = False
        for v in order:
            if not nbrs[v]:
                continue
            votes: Counter = Counter()
            for u, w in nbrs[v].items():
                votes[labels[u]] += w
            top = max(votes.values())
            best = min(lab for lab, c in votes.items() if c == top)
            if labels[v] not in votes or votes[labels[v]] < top:
                labels[v] = best
                changed = True
        if not changed:
            break
    return labels


def partition_nodes(graph: TemporalGraph, K: int, strategy: str = "community", seed: int = 0) -> PartitionMap:
    """Assign every node of ``graph`` to one of ``K`` clients (1-based).

    Strategies: ``hash`` (FNV hash of ``"seed:node"`` modulo K),
    ``degree_balanced`` (greedy bin packing on degree) and ``community``
    (seeded label propagation on the aggregated graph, then smallest
    communities merged into the currently smallest group until K remain).
    Any client left empty receives a node from the largest client.
    """
    nodes = list(graph.node_list)
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > len(nodes):
        raise ValueError(f"K={K} exceeds node count {len(nodes)}")
    if strategy not in PARTITION_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")

    def hkey(v: int) -> int:
        return fnv1a_64(f"{seed}:{v}")

    groups: dict[int, list[int]] = {k: [] for k in range(1, K + 1)}
    nbrs: dict[int, Counter] = {v: Counter() for v in nodes}
    for e in graph.events:
        if not e.is_self_loop:
            nbrs[e.src][e.dst] += 1
            nbrs[e.dst][e.src] += 1

    if strategy == "hash":
        for v in nodes:
            groups[hkey(v) % K + 1].append(v)
    elif strategy == "degree_balanced":
        load = {k: 0 for k in groups}
        for v in sorted(nodes, key=lambda v: (-len(nbrs[v]), v)):
            k = min(load, key=lambda c: (load[c], len(groups[c]), c))
            groups[k].append(v)
            load[k] += len(nbrs[v])
    else:
        rng = np.random.default_rng(seed)
        labels = _label_propagation(nodes, nbrs, rng)
        comms: dict[int, list[int]] = defaultdict(list)
        for v in nodes:
            comms[labels[v]].append(v)
        blocks = sorted(comms.values(), key=lambda c: (-len(c), min(c)))
        # split the largest community while there are too few
        while len(blocks) < K:
            big = blocks.pop(0)
            big = sorted(big)
            half = len(big) // 2
            blocks += [big[:half], big[half:]]
            blocks.sort(key=lambda c: (-len(c), min(c)))
        kept = blocks[:K]
        for extra in blocks[K:]:
            smallest = min(range(K), key=lambda i: (len(kept[i]), min(kept[i])))
            kept[smallest] = kept[smallest] + extra
        kept.sort(key=lambda c: min(c))
        for k, members in enumerate(kept, start=1):
            groups[k] = list(members)

    _repair_empty(groups, K, hkey)
    assignment = {v: k for k, members in groups.items() for v in members}
    return PartitionMap(assignment, K)


def extract_client_graph(graph: TemporalGraph, pm: PartitionMap, k: int, *, cross_client: bool = True) -> TemporalGraph:
    """The events client ``k`` logs: every event touching one of its nodes.

    With ``cross_client=False`` only events whose both endpoints belong to
    ``k`` are kept (the view without 1-hop augmentation).
    """
    if not 1 <= k <= pm.K:
        raise ValueError(f"client {k} outside [1, {pm.K}]")
    if cross_client:
        kept = [e for e in graph.events if pm.client_of(e.src) == k or pm.client_of(e.dst) == k]
    else:
        kept = [e for e in graph.events if pm.client_of(e.src) == k and pm.client_of(e.dst) == k]
    if not kept:
        raise ValueError(f"client {k} observes no events")
    node_list = tuple(sorted({e.src for e in kept} | {e.dst for e in kept}))
    index = graph.node_index()
    if graph.feature_mode == "degree":
        feats = _degree_features(node_list, kept)
    else:
        feats = graph.features[[index[v] for v in node_list]]
    return TemporalGraph(
        node_list,
        tuple(kept),
        feats,
        graph.feature_mode,
        frozenset(),
        any(e.is_self_loop for e in kept),
    )


def augment_one_hop(client_graph: TemporalGraph, pm: PartitionMap, k: int) -> TemporalGraph:
    """Flag the foreign endpoints of cross-client events seen by client ``k``.

    Foreign nodes get :func:`default_feature`, except in ``identity`` mode
    where the id is visible in the client's own logs and is kept.  Calling
    this twice returns an equal graph.
    """
    foreign = frozenset(v for v in client_graph.node_list if pm.client_of(v) != k)
    if not foreign:
        return client_graph
    feats = client_graph.features.copy()
    if client_graph.feature_mode != "identity":
        default = default_feature(client_graph.feature_mode, feats.shape[1])
        for i, v in enumerate(client_graph.node_list):
            if v in foreign:
                feats[i] = default
    return TemporalGraph(
        client_graph.node_list,
        client_graph.events,
        feats,
        client_graph.feature_mode,
        foreign,
        client_graph.has_self_loops,
    )


# --------------------------------------------------------------------------
# reference graph and sketches


def ba_generate(n: int, m: int, seed: int = 0) -> StaticGraph:
    """Barabási-Albert graph seeded with a complete graph on ``m`` nodes.

    Each new node attaches to ``m`` distinct existing nodes drawn with
    probability proportional to degree.  Edge count is
    ``m*(m-1)/2 + (n-m)*m``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if n <= m:
        raise ValueError(f"need n > m, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    edges: set[tuple[int, int]] = {(u, v) for u in range(m) for v in range(u + 1, m)}
    # each node appears once per incident edge, so a uniform pick is degree-proportional
    endpoints: list[int] = [v for uv in sorted(edges) for v in uv]
    for new in range(m, n):
        if endpoints:
            targets: set[int] = set()
            while len(targets) < m:
                targets.add(endpoints[rng.integers(len(endpoints))])
        else:
            # only possible for m == 1: the seed graph is one isolated node
            targets = {0}
        for t in sorted(targets):
            edges.add((t, new))
            endpoints += [t, new]
    return StaticGraph(n, frozenset(edges))


def flatten(graph: TemporalGraph) -> StaticGraph:
    """Aggregate all events into one undirected simple graph (self-loops dropped)."""
    index = graph.node_index()
    pairs = set()
    for e in graph.events:
        if not e.is_self_loop:
            u, v = index[e.src], index[e.dst]
            pairs.add((min(u, v), max(u, v)))
    return StaticGraph(len(graph.node_list), frozenset(pairs))


def wl_histogram(graph: StaticGraph | TemporalGraph, max_iters: int = 3) -> WLHistogram:
    """Weisfeiler-Lehman label histograms, one per refinement round.

    Round 0 labels each node with its degree; round ``i`` relabels with the
    FNV hash of ``"own|sorted neighbour labels"``.
    """
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    if isinstance(graph, TemporalGraph):
        graph = flatten(graph)
    nbrs = graph.neighbors()
    labels = [str(len(nb)) for nb in nbrs]
    hists = [Counter(labels)]
    for _ in range(max_iters):
        labels = [
            format(fnv1a_64(labels[v] + "|" + ",".join(sorted(labels[u] for u in nbrs[v]))), "016x")
            for v in range(graph.n)
        ]
        hists.append(Counter(labels))
    return WLHistogram(tuple(hists))


def jaccard_similarity(h1: WLHistogram, h2: WLHistogram) -> float:
    """Multiset Jaccard of two WL sketches, pooled over all rounds.

    Labels from different rounds are never matched against each other.
    """
    if h1.max_iters != h2.max_iters:
        raise ValueError(f"mismatched max_iters: {h1.max_iters} vs {h2.max_iters}")
    inter = union = 0
    for c1, c2 in zip(h1.per_iteration, h2.per_iteration):
        for label in c1.keys() | c2.keys():
            a, b = c1.get(label, 0), c2.get(label, 0)
            inter += min(a, b)
            union += max(a, b)
    if union == 0:
        return 1.0
    return inter / union


def client_sketch(client_graph: TemporalGraph, max_iters: int = 3) -> WLHistogram:
    return wl_histogram(flatten(client_graph), max_iters)


__all__ = [
    "LogEvent",
    "TemporalGraph",
    "Snapshot",
    "PartitionMap",
    "StaticGraph",
    "WLHistogram",
    "build_graph",
    "snapshot_split",
    "partition_nodes",
    "extract_client_graph",
    "augment_one_hop",
    "ba_generate",
    "wl_histogram",
    "jaccard_similarity",
    "flatten",
    "client_sketch",
    "fnv1a_64",
    "default_feature",
]
