import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedgnids.graph import (
    LogEvent,
    PartitionMap,
    StaticGraph,
    WLHistogram,
    augment_one_hop,
    ba_generate,
    build_graph,
    extract_client_graph,
    flatten,
    fnv1a_64,
    jaccard_similarity,
    partition_nodes,
    snapshot_split,
    wl_histogram,
)
from fedgnids.io import SynthSpec, synth_dataset

from oracles import multiset_jaccard, random_graph_edges


def ev(*rows):
    return [LogEvent(*r) for r in rows]


events_strategy = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(0, 20_000), st.integers(0, 1)),
    min_size=1,
    max_size=60,
)


# build_graph ---------------------------------------------------------------


def test_build_graph_basic():
    g = build_graph(ev((1, 2, 10, 0), (2, 3, 20, 0)))
    assert g.nodes == {1, 2, 3}
    assert len(g.events) == 2
    assert not g.has_self_loops


def test_build_graph_self_loop_is_kept_and_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        g = build_graph(ev((1, 1, 5, 0)))
    assert g.has_self_loops
    assert g.events[0].is_self_loop
    assert "self-loop" in caplog.text


def test_build_graph_empty():
    with pytest.raises(ValueError, match="empty event stream"):
        build_graph([])


def test_build_graph_sorts_events():
    g = build_graph(ev((1, 2, 30, 0), (2, 3, 10, 0), (3, 1, 20, 0)))
    assert [e.timestamp for e in g.events] == [10, 20, 30]


def test_feature_modes():
    events = ev((1, 2, 0, 0), (1, 3, 1, 0))
    deg = build_graph(events, "degree")
    np.testing.assert_allclose(deg.feature(1), [1.0, np.log1p(2)])
    ident = build_graph(events, "identity", universe=[3, 1, 2, 9])
    np.testing.assert_array_equal(ident.feature(3), [1, 0, 0, 0])
    assert ident.n_features == 4
    role = build_graph(events, "role", roles={1: 0, 2: 1, 3: 1})
    np.testing.assert_array_equal(role.feature(2), [0, 1])
    with pytest.raises(ValueError):
        build_graph(events, "bogus")


def test_log_event_validation():
    with pytest.raises(ValueError):
        LogEvent(1, 2, -1, 0)
    with pytest.raises(ValueError):
        LogEvent(1, 2, 0, 2)


# snapshot_split --------------------------------------------------------------


def test_snapshot_count_example():
    g = build_graph(ev((1, 2, 0, 0), (2, 3, 100, 0), (3, 4, 2000, 0)))
    assert len(snapshot_split(g, 1800)) == 2


def test_single_event_one_snapshot():
    snaps = snapshot_split(build_graph(ev((1, 2, 7, 0))), 1800)
    assert len(snaps) == 1
    assert snaps[0].edges == {(1, 2): 1.0}


def test_repeated_events_merge():
    snaps = snapshot_split(build_graph(ev((1, 2, 0, 0), (1, 2, 5, 0), (1, 2, 9, 0))), 1800)
    assert snaps[0].edges[(1, 2)] == 3.0


def test_event_on_window_boundary_is_kept():
    snaps = snapshot_split(build_graph(ev((1, 2, 0, 0), (2, 3, 1800, 0))), 1800)
    assert len(snaps) == 2
    assert snaps[1].edges == {(2, 3): 1.0}


def test_empty_windows_are_kept():
    snaps = snapshot_split(build_graph(ev((1, 2, 0, 0), (2, 3, 9000, 0))), 1800)
    assert len(snaps) == 6
    assert all(not s.edges for s in snaps[1:5])


def test_window_must_be_positive():
    with pytest.raises(ValueError):
        snapshot_split(build_graph(ev((1, 2, 0, 0))), 0)


@given(events_strategy, st.integers(1, 5000))
def test_snapshot_weights_conserve_events(rows, window):
    g = build_graph(ev(*rows))
    snaps = snapshot_split(g, window)
    assert sum(sum(s.edges.values()) for s in snaps) == len(rows)
    for s in snaps:
        assert all(u in s.nodes and v in s.nodes for u, v in s.edges)
        assert all(w >= 1 for w in s.edges.values())


# partitioning --------------------------------------------------------------


def _ring(n):
    return build_graph(ev(*[(i, (i + 1) % n, i, 0) for i in range(n)]))


def test_hash_partition_definition():
    g = _ring(10)
    pm = partition_nodes(g, 2, "hash", seed=3)
    for v in g.node_list:
        assert pm.client_of(v) == fnv1a_64(f"3:{v}") % 2 + 1


@pytest.mark.parametrize("strategy", ["hash", "degree_balanced", "community"])
def test_one_node_per_client_when_k_equals_n(strategy):
    pm = partition_nodes(_ring(10), 10, strategy, seed=0)
    assert sorted(pm.sizes().values()) == [1] * 10


@pytest.mark.parametrize("strategy", ["hash", "degree_balanced", "community"])
def test_partition_deterministic_and_total(strategy):
    g = _ring(30)
    a = partition_nodes(g, 3, strategy, seed=5)
    b = partition_nodes(g, 3, strategy, seed=5)
    assert a == b
    assert set(a.assignment) == set(g.node_list)
    assert all(n >= 1 for n in a.sizes().values())


def test_partition_errors():
    g = _ring(5)
    with pytest.raises(ValueError):
        partition_nodes(g, 6, "hash")
    with pytest.raises(ValueError):
        partition_nodes(g, 1, "hash")
    with pytest.raises(ValueError):
        partition_nodes(g, 2, "nope")
    with pytest.raises(ValueError):
        PartitionMap({1: 1, 2: 1}, 2)


def test_community_partition_recovers_blocks():
    graph, blocks = synth_dataset(SynthSpec(seed=0))
    pm = partition_nodes(graph, 4, "community", seed=0)
    for k in range(1, 5):
        members = pm.members(k)
        top = Counter(blocks[v] for v in members).most_common(1)[0][1]
        assert top / len(members) >= 0.9


# client views --------------------------------------------------------------


def test_extract_client_graph_views():
    g = build_graph(ev((1, 2, 0, 0), (1, 3, 1, 0), (3, 4, 2, 0)))
    pm = PartitionMap({1: 1, 2: 1, 3: 2, 4: 2}, 2)
    c1 = extract_client_graph(g, pm, 1)
    assert c1.nodes == {1, 2, 3}  # 3 is foreign
    assert all(not (pm.client_of(e.src) != 1 and pm.client_of(e.dst) != 1) for e in c1.events)
    assert len(c1.events) == 2
    full = extract_client_graph(g, PartitionMap({1: 1, 2: 1, 3: 1, 4: 2}, 2), 1)
    assert len(full.events) == 3
    with pytest.raises(ValueError):
        extract_client_graph(g, pm, 3)


@given(events_strategy, st.integers(2, 4), st.integers(0, 3))
def test_client_views_cover_events(rows, K, seed):
    g = build_graph(ev(*rows))
    if len(g.node_list) < K:
        return
    pm = partition_nodes(g, K, "hash", seed)
    seen = Counter()
    for k in range(1, K + 1):
        try:
            cg = extract_client_graph(g, pm, k)
        except ValueError:
            continue
        seen.update(cg.events)
    total = Counter(g.events)
    for e, n in total.items():
        assert n <= seen[e] <= 2 * n


def test_augment_one_hop_flags_and_is_idempotent():
    rows = [(1, 2, 0, 0), (2, 3, 1, 0), (1, 3, 2, 0), (3, 4, 3, 0), (1, 5, 4, 0)]
    g = build_graph(ev(*rows))
    pm = PartitionMap({1: 1, 2: 1, 3: 1, 4: 2, 5: 2}, 2)
    cg = extract_client_graph(g, pm, 1)
    aug = augment_one_hop(cg, pm, 1)
    assert len(aug.node_list) == 5
    assert aug.foreign == {4, 5}
    np.testing.assert_array_equal(aug.feature(4), [1.0, 0.0])
    again = augment_one_hop(aug, pm, 1)
    assert again.foreign == aug.foreign
    np.testing.assert_array_equal(again.features, aug.features)


def test_augment_without_cross_client_events_is_identity():
    g = build_graph(ev((1, 2, 0, 0), (3, 4, 1, 0)))
    pm = PartitionMap({1: 1, 2: 1, 3: 2, 4: 2}, 2)
    cg = extract_client_graph(g, pm, 1)
    assert augment_one_hop(cg, pm, 1) is cg


# BA reference graph ----------------------------------------------------------


def test_ba_examples():
    g = ba_generate(10, 2, seed=0)
    assert g.n == 10 and len(g.adjacency) == 17
    g = ba_generate(4, 3, seed=0)
    assert g.adjacency == {(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)}
    a, b = ba_generate(1000, 5, 1), ba_generate(1000, 5, 2)
    assert a.adjacency != b.adjacency
    assert ba_generate(1000, 5, 1) == a


def test_ba_errors():
    with pytest.raises(ValueError):
        ba_generate(3, 3, 0)
    with pytest.raises(ValueError):
        ba_generate(3, 0, 0)


@given(st.integers(2, 80), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_ba_contract(n, m, seed):
    if n <= m:
        return
    g = ba_generate(n, m, seed)
    assert len(g.adjacency) == m * (m - 1) // 2 + (n - m) * m
    assert all(0 <= u < v < n for u, v in g.adjacency)
    assert g.is_connected()


def test_static_graph_validation():
    with pytest.raises(ValueError):
        StaticGraph(3, frozenset({(1, 0)}))


# WL sketches -----------------------------------------------------------------


def test_wl_path_and_isolated():
    path = StaticGraph(3, frozenset({(0, 1), (1, 2)}))
    assert wl_histogram(path, 0).per_iteration[0] == Counter({"1": 2, "2": 1})
    lone = wl_histogram(StaticGraph(1, frozenset()), 3)
    assert all(sum(c.values()) == 1 for c in lone.per_iteration)
    assert lone.per_iteration[0] == Counter({"0": 1})


def _permute(n, edges, perm):
    return StaticGraph(n, frozenset((min(perm[u], perm[v]), max(perm[u], perm[v])) for u, v in edges))


@given(st.integers(1, 64), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_wl_permutation_invariance(n, p, seed):
    rng = np.random.default_rng(seed)
    edges = random_graph_edges(rng, n, p)
    g = StaticGraph(n, frozenset(edges))
    h = wl_histogram(g, 3)
    h2 = wl_histogram(_permute(n, edges, rng.permutation(n)), 3)
    assert h == h2
    assert all(sum(c.values()) == n for c in h.per_iteration)
    assert jaccard_similarity(h, h) == 1.0


def test_wl_separates_different_structures():
    star = StaticGraph(4, frozenset({(0, 1), (0, 2), (0, 3)}))
    path = StaticGraph(4, frozenset({(0, 1), (1, 2), (2, 3)}))
    assert jaccard_similarity(wl_histogram(star), wl_histogram(path)) < 1.0


def test_wl_temporal_graph_uses_flattened_structure():
    g = build_graph(ev((1, 2, 0, 0), (2, 1, 5, 0), (2, 3, 9, 0), (3, 3, 9, 0)))
    assert wl_histogram(g, 2) == wl_histogram(flatten(g), 2)
    assert flatten(g).adjacency == {(0, 1), (1, 2)}


def test_jaccard_examples():
    h1 = WLHistogram((Counter({"a": 2, "b": 1}),))
    h2 = WLHistogram((Counter({"a": 1, "c": 1}),))
    assert jaccard_similarity(h1, h2) == pytest.approx(0.25)
    assert jaccard_similarity(h1, WLHistogram((Counter({"z": 3}),))) == 0.0
    with pytest.raises(ValueError):
        jaccard_similarity(h1, WLHistogram((Counter(), Counter())))


def test_jaccard_client_vs_reference_in_open_interval():
    rng = np.random.default_rng(4)
    g = StaticGraph(20, frozenset(random_graph_edges(rng, 20, 0.2)))
    h, ref = wl_histogram(g, 3), wl_histogram(ba_generate(20, 2, 0), 3)
    value = jaccard_similarity(h, ref)
    assert 0.0 < value < 1.0
    assert value == pytest.approx(multiset_jaccard(h.per_iteration, ref.per_iteration))


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_jaccard_symmetric_bounded_and_matches_oracle(n1, n2, seed):
    rng = np.random.default_rng(seed)
    a = wl_histogram(StaticGraph(n1, frozenset(random_graph_edges(rng, n1, 0.3))), 2)
    b = wl_histogram(StaticGraph(n2, frozenset(random_graph_edges(rng, n2, 0.3))), 2)
    j = jaccard_similarity(a, b)
    assert j == jaccard_similarity(b, a)
    assert 0.0 <= j <= 1.0
    assert j == pytest.approx(multiset_jaccard(a.per_iteration, b.per_iteration), abs=1e-12)
    assert (j == 1.0) == (a == b)


def test_fnv_known_vectors():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
