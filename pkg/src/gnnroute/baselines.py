"""Reference solvers: OSPF, Shortest Available Path, Simulated Annealing and
an exhaustive search for tiny instances.

OSPF, Simulated Annealing and the exhaustive search work over middlepoint
assignments, one middlepoint per demand in episode order (``m == dst`` means
the direct OSPF path). SAP picks explicit hop-minimal paths instead.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from .env import Problem, reset, max_utilization
from .topology import Topology, all_shortest_paths


@dataclass
class Assignment:
    solver: str
    max_util: float
    middlepoints: np.ndarray | None = None
    paths: list[tuple[int, ...]] | None = None
    steps: int = 0
    seconds: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def ospf_baseline(problem: Problem) -> Assignment:
    t0 = time.perf_counter()
    state = reset(problem)
    return Assignment(
        "ospf",
        max_utilization(state),
        middlepoints=state.assignment.copy(),
        seconds=time.perf_counter() - t0,
    )


# -- Shortest Available Path ---------------------------------------------------


@lru_cache(maxsize=32)
def _candidate_paths(topology: Topology) -> dict[tuple[int, int], list[np.ndarray]]:
    n = topology.n_nodes
    out = {}
    for s in range(n):
        for d in range(n):
            if s != d:
                out[s, d] = [
                    np.array([topology.link_index[(a, b)] for a, b in zip(seq, seq[1:])], dtype=np.int64)
                    for seq in all_shortest_paths(topology, s, d)
                ]
    return out


def sap(problem: Problem) -> Assignment:
    """Greedy widest-shortest allocation on an initially empty network.

    Demands are taken in episode order (largest first). Each goes on the
    hop-minimal path with the largest bottleneck residual capacity; ties go
    to the lexicographically smallest node sequence.
    """
    t0 = time.perf_counter()
    cands = _candidate_paths(problem.topology)
    caps = problem.capacities
    loads = np.zeros_like(caps)
    chosen: list[tuple[int, ...]] = []
    for s, d, vol in zip(problem.src, problem.dst, problem.volume):
        best, best_res = None, -math.inf
        for path in cands[int(s), int(d)]:
            res = float((caps[path] - loads[path]).min())
            if res > best_res:
                best, best_res = path, res
        loads[best] += vol
        chosen.append(tuple(int(l) for l in best))
    return Assignment(
        "sap",
        float((loads / caps).max()),
        paths=chosen,
        seconds=time.perf_counter() - t0,
    )


# -- numba kernels ---------------------------------------------------------------


@njit(cache=True)
def _move(loads, ptr, link_ids, mult, slot, vol, sign):
    for j in range(ptr[slot], ptr[slot + 1]):
        loads[link_ids[j]] += sign * vol * mult[j]


@njit(cache=True)
def _max_util(loads, caps):
    best = 0.0
    for j in range(loads.size):
        u = loads[j] / caps[j]
        if u > best:
            best = u
    return best


@njit(cache=True)
def _scratch_loads(assign, src, dst, vol, ptr, link_ids, mult, n, n_links):
    loads = np.zeros(n_links)
    for i in range(assign.size):
        slot = (src[i] * n + dst[i]) * n + assign[i]
        _move(loads, ptr, link_ids, mult, slot, vol[i], 1.0)
    return loads


@njit(cache=True)
def _anneal_chunk(
    loads, caps, assign, best_assign, src, dst, vol, ptr, link_ids, mult, n,
    pick, mp_raw, u, temps, state, step0, audit_every,
):
    # state = [current energy, best energy, accepted moves, audits, audit mismatches]
    cur = state[0]
    for k in range(pick.size):
        i = pick[k]
        s = src[i]
        m = mp_raw[k] + (1 if mp_raw[k] >= s else 0)
        old = assign[i]
        if m != old:
            base = (s * n + dst[i]) * n
            _move(loads, ptr, link_ids, mult, base + old, vol[i], -1.0)
            _move(loads, ptr, link_ids, mult, base + m, vol[i], 1.0)
            new = _max_util(loads, caps)
            delta = new - cur
            if delta <= 0.0 or u[k] < math.exp(-delta / temps[k]):
                assign[i] = m
                cur = new
                state[2] += 1
                if cur < state[1]:
                    state[1] = cur
                    best_assign[:] = assign
            else:
                _move(loads, ptr, link_ids, mult, base + m, vol[i], -1.0)
                _move(loads, ptr, link_ids, mult, base + old, vol[i], 1.0)
        if audit_every > 0 and (step0 + k + 1) % audit_every == 0:
            ref = _scratch_loads(assign, src, dst, vol, ptr, link_ids, mult, n, loads.size)
            state[3] += 1
            if _max_util(ref, caps) != cur:
                state[4] += 1
            for j in range(loads.size):
                if ref[j] != loads[j]:
                    state[4] += 1
                    break
    state[0] = cur


@njit(cache=True)
def _enumerate(src, dst, vol, caps, ptr, link_ids, mult, n):
    n_dem = src.size
    first = np.empty(n_dem, dtype=np.int64)
    for i in range(n_dem):
        first[i] = 1 if src[i] == 0 else 0
    assign = first.copy()
    loads = _scratch_loads(assign, src, dst, vol, ptr, link_ids, mult, n, caps.size)
    best = _max_util(loads, caps)
    best_assign = assign.copy()
    count = 1
    while True:
        j = n_dem - 1
        while j >= 0:
            base = (src[j] * n + dst[j]) * n
            nxt = assign[j] + 1
            if nxt == src[j]:
                nxt += 1
            if nxt < n:
                _move(loads, ptr, link_ids, mult, base + assign[j], vol[j], -1.0)
                _move(loads, ptr, link_ids, mult, base + nxt, vol[j], 1.0)
                assign[j] = nxt
                break
            _move(loads, ptr, link_ids, mult, base + assign[j], vol[j], -1.0)
            _move(loads, ptr, link_ids, mult, base + first[j], vol[j], 1.0)
            assign[j] = first[j]
            j -= 1
        if j < 0:
            break
        count += 1
        u = _max_util(loads, caps)
        if u < best:
            best = u
            best_assign[:] = assign
    return best, best_assign, count


# -- Simulated Annealing --------------------------------------------------------------


@dataclass(frozen=True)
class AnnealSchedule:
    t_start: float
    t_end: float = 1e-5
    steps: int = 4_000_000

    def __post_init__(self) -> None:
        if not self.t_start > self.t_end > 0:
            raise ValueError("need t_start > t_end > 0")
        if self.steps < 2:
            raise ValueError("need at least two steps")

    @property
    def decay(self) -> float:
        return (self.t_end / self.t_start) ** (1.0 / (self.steps - 1))

    def temperatures(self, start: int, stop: int) -> np.ndarray:
        return self.t_start * self.decay ** np.arange(start, stop, dtype=np.float64)


def calibrate_start_temperature(
    problem: Problem,
    rng: np.random.Generator,
    probe_moves: int = 1000,
    quantile: float = 0.9,
    t_end: float = 1e-5,
) -> float:
    """90th percentile of the non-zero |energy change| over random single moves
    from the OSPF state."""
    state = reset(problem)
    caps = problem.capacities
    e0 = max_utilization(state)
    n = problem.n_nodes
    deltas = []
    for _ in range(probe_moves):
        i = int(rng.integers(problem.n_demands))
        s = int(problem.src[i])
        raw = int(rng.integers(n - 1))
        m = raw + (raw >= s)
        loads = state.loads.copy()
        ids, mult = problem.path_arrays(s, int(problem.dst[i]), int(state.assignment[i]))
        loads[ids] -= problem.volume[i] * mult
        ids, mult = problem.path_arrays(s, int(problem.dst[i]), m)
        loads[ids] += problem.volume[i] * mult
        deltas.append(abs(float((loads / caps).max()) - e0))
    nonzero = np.array([d for d in deltas if d > 0])
    t0 = float(np.quantile(nonzero, quantile)) if nonzero.size else 0.0
    # degenerate probes (every move neutral) still need a valid schedule
    return max(t0, 10 * t_end)


def simulated_annealing(
    problem: Problem,
    steps: int = 4_000_000,
    seed: int = 0,
    schedule: AnnealSchedule | None = None,
    audit_every: int = 10_000,
    chunk: int = 100_000,
) -> Assignment:
    """Metropolis search over middlepoint assignments, starting from OSPF.

    Each step re-routes one uniformly chosen demand through a uniformly chosen
    middlepoint other than its source. Returns the best assignment seen.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    if schedule is None:
        schedule = AnnealSchedule(calibrate_start_temperature(problem, rng), 1e-5, steps)
    state = reset(problem)
    loads = state.loads.copy()
    assign = state.assignment.copy()
    best_assign = assign.copy()
    e0 = max_utilization(state)
    stats = np.array([e0, e0, 0.0, 0.0, 0.0])
    n = problem.n_nodes
    done = 0
    while done < schedule.steps:
        k = min(chunk, schedule.steps - done)
        pick = rng.integers(0, problem.n_demands, size=k)
        mp_raw = rng.integers(0, n - 1, size=k)
        u = rng.random(k)
        _anneal_chunk(
            loads, problem.capacities, assign, best_assign, problem.src, problem.dst,
            problem.volume, problem.ptr, problem.link_ids, problem.mult, n,
            pick, mp_raw, u, schedule.temperatures(done, done + k), stats, done, audit_every,
        )
        done += k
    if stats[4]:
        raise AssertionError(f"incremental energy drifted from recomputation in {int(stats[4])} audits")
    return Assignment(
        "sa",
        float(stats[1]),
        middlepoints=best_assign,
        steps=schedule.steps,
        seconds=time.perf_counter() - t0,
        seed=seed,
        meta={
            "t_start": schedule.t_start,
            "t_end": schedule.t_end,
            "accepted": int(stats[2]),
            "audits": int(stats[3]),
            "initial": e0,
        },
    )


def brute_force(problem: Problem, max_assignments: int = 3**12) -> Assignment:
    """Exhaustive minimum; ties resolve to the lexicographically smallest vector."""
    n = problem.n_nodes
    total = (n - 1) ** problem.n_demands
    if total > max_assignments:
        raise ValueError(f"{total} assignments exceed the enumeration limit ({max_assignments})")
    t0 = time.perf_counter()
    best, best_assign, count = _enumerate(
        problem.src, problem.dst, problem.volume, problem.capacities,
        problem.ptr, problem.link_ids, problem.mult, n,
    )
    return Assignment(
        "optimal",
        float(best),
        middlepoints=best_assign,
        steps=int(count),
        seconds=time.perf_counter() - t0,
    )
