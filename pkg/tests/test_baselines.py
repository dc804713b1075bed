import itertools

import numpy as np
import pytest

from conftest import K4, RING4_CHORD, small_problem
from gnnroute.baselines import (
    AnnealSchedule,
    brute_force,
    calibrate_start_temperature,
    ospf_baseline,
    sap,
    simulated_annealing,
)
from gnnroute.env import Problem, max_utilization, reset, step
from gnnroute.topology import Topology, all_shortest_paths, bundled_topology, shortest_paths
from gnnroute.traffic import generate_instance

DIAMOND = Topology.from_cables(4, [(0, 1), (0, 2), (1, 3), (2, 3)], capacity=10.0, name="diamond")
TRIANGLE = Topology.from_cables(3, [(0, 1), (1, 2), (0, 2)], capacity=10.0)


def scratch_util(problem: Problem, middlepoints) -> float:
    """Max utilization by walking node sequences of both segments."""
    topo = problem.topology
    table = shortest_paths(topo)
    loads = np.zeros(topo.n_links)
    for s, d, v, m in zip(problem.src, problem.dst, problem.volume, middlepoints):
        seq = list(table.nodes[s][m]) + list(table.nodes[m][d])[1:]
        for a, b in zip(seq, seq[1:]):
            loads[topo.link_index[a, b]] += v
    return float((loads / topo.capacities).max())


def replay_util(problem: Problem, middlepoints) -> float:
    state = reset(problem)
    for m in middlepoints:
        step(state, int(m))
    return max_utilization(state)


def test_ospf_matches_reset():
    for seed in range(5):
        p = small_problem(seed, K4)
        out = ospf_baseline(p)
        assert out.max_util == max_utilization(reset(p))
        assert 0.95 <= out.max_util <= 1.3
        assert np.array_equal(out.middlepoints, p.dst)


def test_ospf_single_demand():
    tm = np.zeros((3, 3))
    tm[0, 2] = 4.0
    assert ospf_baseline(Problem(TRIANGLE, tm)).max_util == 0.4


def test_sap_equals_ospf_with_unique_paths():
    # a tree has exactly one path per pair
    tree = Topology.from_cables(5, [(0, 1), (1, 2), (1, 3), (3, 4)], capacity=100.0)
    p = Problem.from_instance(generate_instance(tree, 0))
    assert sap(p).max_util == ospf_baseline(p).max_util


def test_sap_tie_takes_lowest_sequence():
    tm = np.zeros((4, 4))
    tm[0, 3] = 6.0
    tm[3, 0] = 1.0
    out = sap(Problem(DIAMOND, tm))
    li = DIAMOND.link_index
    assert out.paths[0] == (li[0, 1], li[1, 3])
    # the reverse demand uses the opposite links, still empty
    assert out.paths[1] == (li[3, 1], li[1, 0])


def test_sap_splits_over_parallel_paths():
    # 0->3 goes first (tie on volume, lower pair) and takes 0-1-3; then 0->4
    # compares residuals 5 (via 1) and 10 (via 2) and takes the empty branch
    topo = Topology.from_cables(5, [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)], capacity=10.0)
    tm = np.zeros((5, 5))
    tm[0, 3] = 5.0
    tm[0, 4] = 5.0
    out = sap(Problem(topo, tm))
    li = topo.link_index
    assert out.paths[:2] == [(li[0, 1], li[1, 3]), (li[0, 2], li[2, 3], li[3, 4])]
    assert out.max_util == 0.5
    # OSPF's tie-break puts both on the 0-1 branch
    assert ospf_baseline(Problem(topo, tm)).max_util == 1.0


def test_sap_paths_are_hop_minimal_and_consistent():
    p = small_problem(3, RING4_CHORD)
    out = sap(p)
    topo = p.topology
    loads = np.zeros(topo.n_links)
    for s, d, v, path in zip(p.src, p.dst, p.volume, out.paths):
        seqs = all_shortest_paths(topo, int(s), int(d))
        as_links = [tuple(topo.link_index[a, b] for a, b in zip(q, q[1:])) for q in seqs]
        assert path in as_links
        loads[list(path)] += v
    assert out.max_util == float((loads / topo.capacities).max())


def test_sap_improves_on_ospf_on_gbn():
    base = bundled_topology("gbn")
    table = shortest_paths(base)
    ospf, heur = [], []
    for seed in range(50):
        p = Problem.from_instance(generate_instance(base, 5000 + seed, table=table))
        ospf.append(ospf_baseline(p).max_util)
        heur.append(sap(p).max_util)
    assert np.mean(heur) < np.mean(ospf)


def test_schedule():
    s = AnnealSchedule(1.0, 1e-5, 1000)
    temps = s.temperatures(0, 1000)
    assert temps[0] == 1.0 and temps[-1] == pytest.approx(1e-5, rel=1e-9)
    assert np.all(np.diff(temps) < 0)
    with pytest.raises(ValueError):
        AnnealSchedule(1e-6, 1e-5)
    with pytest.raises(ValueError):
        AnnealSchedule(1.0, 1e-5, 1)


def test_cold_metropolis_rejects_worse_moves():
    assert np.exp(-0.01 / 1e-5) < 1e-300


def test_sa_result_replays_and_never_worse():
    for seed in range(4):
        p = small_problem(seed, RING4_CHORD)
        out = simulated_annealing(p, steps=20_000, seed=seed)
        assert out.max_util <= ospf_baseline(p).max_util
        assert replay_util(p, out.middlepoints) == out.max_util
        assert out.meta["audits"] > 0


def test_sa_is_reproducible():
    p = small_problem(2, K4)
    a = simulated_annealing(p, steps=30_000, seed=7)
    b = simulated_annealing(p, steps=30_000, seed=7)
    assert a.max_util == b.max_util and np.array_equal(a.middlepoints, b.middlepoints)
    assert a.meta == b.meta


def test_start_temperature_positive():
    p = small_problem(1, K4)
    t0 = calibrate_start_temperature(p, np.random.default_rng(0))
    assert t0 > 1e-5


def test_brute_force_two_nodes():
    p = Problem(Topology.from_cables(2, [(0, 1)], capacity=10.0), np.array([[0.0, 3.0], [5.0, 0.0]]))
    out = brute_force(p)
    assert out.max_util == ospf_baseline(p).max_util == 0.5 and out.steps == 1


def test_brute_force_matches_independent_enumeration():
    tm = np.array([[0, 7, 3], [2, 0, 6], [4, 1, 0]], dtype=float)
    p = Problem(TRIANGLE, tm)
    choices = [[m for m in range(3) if m != s] for s in p.src]
    best, best_vec = np.inf, None
    for vec in itertools.product(*choices):
        u = scratch_util(p, vec)
        if u < best:
            best, best_vec = u, vec
    out = brute_force(p)
    assert out.steps == 64
    assert out.max_util == best
    assert tuple(out.middlepoints.tolist()) == best_vec


def test_brute_force_limit():
    base = bundled_topology("nsfnet")
    p = Problem.from_instance(generate_instance(base, 0))
    with pytest.raises(ValueError, match="exceed"):
        brute_force(p)


@pytest.mark.parametrize("topo", [K4, RING4_CHORD], ids=["k4", "ring4"])
def test_oracle_chain(topo):
    for seed in range(3):
        p = small_problem(seed, topo)
        opt = brute_force(p)
        sa = simulated_annealing(p, steps=100_000, seed=seed)
        assert opt.max_util <= sa.max_util <= ospf_baseline(p).max_util
        assert opt.max_util <= sap(p).max_util
        assert replay_util(p, opt.middlepoints) == opt.max_util
        assert scratch_util(p, opt.middlepoints) == opt.max_util
