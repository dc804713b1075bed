import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import K4, random_topology
from gnnroute.topology import (
    BUNDLED,
    Topology,
    TopologyError,
    action_set,
    all_shortest_paths,
    bundled_topology,
    load_topology,
    middlepoint_path,
    parse_topology,
    save_topology,
    shortest_paths,
)

LINE3 = Topology.from_cables(3, [(0, 1), (1, 2)], name="line")
RING4 = Topology.from_cables(4, [(0, 1), (1, 2), (2, 3), (3, 0)], name="ring")


def simple_paths(topo: Topology, s: int, d: int, max_len: int):
    """Depth-bounded enumeration of every simple path; independent of BFS."""
    out = []

    def walk(u, seq):
        if u == d:
            out.append(tuple(seq))
            return
        if len(seq) > max_len:
            return
        for v in topo.successors[u]:
            if v not in seq:
                walk(v, seq + [v])

    walk(s, [s])
    return out


def test_line_path():
    t = shortest_paths(LINE3)
    assert t.nodes[0][2] == (0, 1, 2)
    assert t.path(0, 2) == (LINE3.link_index[0, 1], LINE3.link_index[1, 2])


def test_ring_tie_break_goes_through_lower_node():
    t = shortest_paths(RING4)
    assert t.hops(0, 2) == 2
    assert t.nodes[0][2] == (0, 1, 2)


def test_empty_self_path():
    t = shortest_paths(K4)
    assert all(t.path(s, s) == () for s in range(4))


def test_nsfnet_paths_are_hop_minimal(nsfnet, nsfnet_table):
    pairs = 0
    for s in range(14):
        for d in range(14):
            if s == d:
                continue
            pairs += 1
            seq = nsfnet_table.nodes[s][d]
            lengths = [len(p) - 1 for p in simple_paths(nsfnet, s, d, len(seq) + 1)]
            assert len(seq) - 1 == min(lengths)
            assert len(set(seq)) == len(seq)
            # lexicographic tie-break over every minimal path
            assert seq == min(p for p in simple_paths(nsfnet, s, d, len(seq)) if len(p) == len(seq))
    assert pairs == 182


def test_table_is_deterministic(nsfnet, nsfnet_table):
    assert shortest_paths(nsfnet).links == nsfnet_table.links


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relabeling_permutes_table(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 10))
    topo = random_topology(rng, n)
    perm = rng.permutation(n)
    relabeled = topo.relabeled(perm, rng.permutation(topo.n_links))
    base = shortest_paths(topo)
    # rank the relabeled nodes by their original id so tie-breaks agree
    rank = np.empty(n, dtype=int)
    rank[perm] = np.arange(n)
    other = shortest_paths(relabeled, rank=rank)
    for s in range(n):
        for d in range(n):
            assert other.nodes[perm[s]][perm[d]] == tuple(int(perm[u]) for u in base.nodes[s][d])


def test_middlepoint_equal_to_destination_is_direct(nsfnet_table):
    mp = middlepoint_path(nsfnet_table, 1, 5, 5)
    assert mp.links == nsfnet_table.path(1, 5)
    assert np.all(mp.multiplicity == 1)


def test_middlepoint_concatenates_segments(nsfnet_table):
    mp = middlepoint_path(nsfnet_table, 1, 5, 3)
    assert mp.links == nsfnet_table.path(1, 3) + nsfnet_table.path(3, 5)
    counts = Counter(mp.links)
    assert dict(zip(mp.link_ids.tolist(), mp.multiplicity.tolist())) == counts


def test_backtracking_middlepoint_path():
    t = shortest_paths(LINE3)
    mp = middlepoint_path(t, 0, 1, 2)
    li = LINE3.link_index
    assert mp.links == (li[0, 1], li[1, 2], li[2, 1])
    assert mp.n_traversals == 3
    assert set(mp.multiplicity.tolist()) == {1}


def test_multiplicities_count_traversals():
    topo = bundled_topology("geant2")
    table = shortest_paths(topo)
    for s in range(topo.n_nodes):
        for d in range(topo.n_nodes):
            for m in range(topo.n_nodes):
                if s == d or m == s:
                    continue
                mp = middlepoint_path(table, s, d, m)
                counts = Counter(mp.links)
                assert dict(zip(mp.link_ids.tolist(), mp.multiplicity.tolist())) == counts


def test_middlepoint_contract():
    t = shortest_paths(K4)
    with pytest.raises(ValueError):
        middlepoint_path(t, 0, 2, 0)
    with pytest.raises(ValueError):
        middlepoint_path(t, 1, 1, 2)


def test_action_sets(nsfnet):
    assert len(action_set(nsfnet, 0)) == 13
    assert action_set(Topology.from_cables(2, [(0, 1)]), 0) == [1]
    assert action_set(K4, 2) == [0, 1, 3]


def test_middlepoint_arrays_match_paths(nsfnet_table):
    ptr, ids, mult = nsfnet_table.middlepoint_arrays
    n = 14
    for s, d, m in [(0, 13, 5), (4, 2, 2), (13, 0, 7)]:
        slot = (s * n + d) * n + m
        mp = middlepoint_path(nsfnet_table, s, d, m)
        assert ids[ptr[slot]:ptr[slot + 1]].tolist() == mp.link_ids.tolist()
        assert mult[ptr[slot]:ptr[slot + 1]].tolist() == mp.multiplicity.tolist()


def test_all_shortest_paths_order():
    assert all_shortest_paths(RING4, 0, 2) == [(0, 1, 2), (0, 3, 2)]
    assert all_shortest_paths(K4, 1, 1) == []


@pytest.mark.parametrize("name,nodes,cables", [("nsfnet", 14, 21), ("gbn", 17, 26), ("geant2", 24, 37)])
def test_bundled_sizes(name, nodes, cables):
    t = bundled_topology(name)
    assert t.n_nodes == nodes and t.n_links == 2 * cables
    assert name in BUNDLED


@pytest.mark.parametrize(
    "links,msg",
    [
        ([(0, 0, 1.0)], "self-loop"),
        ([(0, 1, 1.0)], "reverse"),
        ([(0, 1, 0.0), (1, 0, 1.0)], "positive"),
        ([(0, 5, 1.0), (5, 0, 1.0)], "out of range"),
        ([(0, 1, 1.0), (1, 0, 1.0), (0, 1, 2.0)], "duplicate"),
    ],
)
def test_invalid_topologies(links, msg):
    with pytest.raises(TopologyError, match=msg):
        Topology(3 if msg != "reverse" else 2, links)


def test_disconnected_topology():
    with pytest.raises(TopologyError, match="not connected"):
        Topology.from_cables(4, [(0, 1), (2, 3)])


def test_round_trip_file(tmp_path, nsfnet):
    path = tmp_path / "t.json"
    save_topology(nsfnet, path)
    assert load_topology(path) == nsfnet


def test_parse_error_names_the_line():
    text = json.dumps({"nodes": 2, "links": [{"from": 0, "to": 1, "capacity": 1}]}, indent=1)
    with pytest.raises(TopologyError, match=r"^<string>:5: link 0"):
        parse_topology(text)
    bad = '{"nodes": 2,\n "links": [\n {"from": 0, "to": 1, "capacity": 1},\n {"from": 1, "to": 0, "capacity": -3}\n]}'
    with pytest.raises(TopologyError, match=r"^<string>:4: "):
        parse_topology(bad)
    with pytest.raises(TopologyError, match=r"^<string>:2: "):
        parse_topology('{"nodes": 2,\n "links": [}')
