"""Small hand-built inputs shared by several test modules."""

import numpy as np

from fedgnids.graph import Snapshot, StaticGraph, wl_histogram
from fedgnids.model import ClientSequence

from oracles import random_graph_edges


def snap(t, edges, nodes=None):
    edges = {tuple(e): 1.0 for e in edges}
    nodes = frozenset(nodes if nodes is not None else {v for e in edges for v in e})
    return Snapshot(t, nodes, edges, (t * 10, t * 10 + 10))


def small_sequence(seed=0, n=6, T=3, d_x=3, offset=0):
    rng = np.random.default_rng(seed)
    snaps = []
    for t in range(T):
        edges = random_graph_edges(rng, n, 0.4) or [(0, 1)]
        snaps.append(snap(t, edges, range(n)))
    feats = rng.normal(size=(n, d_x))
    return ClientSequence(snaps, list(range(n)), feats, offset=offset)


def ring_sketch(n=6):
    return wl_histogram(StaticGraph(n, frozenset(tuple(sorted((i, (i + 1) % n))) for i in range(n))), 3)
