"""Fluid-model routing environment.

An episode starts with every demand on its OSPF path (middlepoint = dst).
Demands are then visited once each, largest volume first, and the agent
chooses a middlepoint for each. The reward of a step is the drop in maximum
link utilization it causes, so an episode's return telescopes to
``initial_max_util - final_max_util``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .topology import PathTable, Topology, shortest_paths
from .traffic import Instance


class EpisodeError(RuntimeError):
    """Illegal step: episode finished, or middlepoint equals the source."""


class Problem:
    """Static data shared by every episode on one (topology, TM) pair."""

    def __init__(self, topology: Topology, tm: np.ndarray, table: PathTable | None = None):
        self.topology = topology
        self.table = table if table is not None else shortest_paths(topology)
        if self.table.topology.n_links != topology.n_links:
            raise ValueError("path table belongs to a different topology")
        self.tm = np.asarray(tm, dtype=np.float64)
        n = topology.n_nodes
        pairs = [(s, d) for s in range(n) for d in range(n) if s != d]
        # largest volume first, then (src, dst) ascending
        pairs.sort(key=lambda p: (-self.tm[p], p[0], p[1]))
        self.src = np.array([p[0] for p in pairs], dtype=np.int64)
        self.dst = np.array([p[1] for p in pairs], dtype=np.int64)
        self.volume = np.array([self.tm[p] for p in pairs], dtype=np.float64)
        self.capacities = topology.capacities
        self.ptr, self.link_ids, self.mult = self.table.middlepoint_arrays

    @classmethod
    def from_instance(cls, instance: Instance, table: PathTable | None = None) -> "Problem":
        return cls(instance.topology, instance.tm, table)

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes

    @property
    def n_demands(self) -> int:
        return self.src.size

    def slot(self, src: int, dst: int, m: int) -> int:
        n = self.topology.n_nodes
        return (src * n + dst) * n + m

    def path_arrays(self, src: int, dst: int, m: int) -> tuple[np.ndarray, np.ndarray]:
        k = self.slot(src, dst, m)
        a, b = self.ptr[k], self.ptr[k + 1]
        return self.link_ids[a:b], self.mult[a:b]

    @cached_property
    def path_mult(self) -> np.ndarray:
        """Dense ``[N, N, N, L]`` traversal counts of each middlepoint path."""
        n, L = self.topology.n_nodes, self.topology.n_links
        out = np.zeros((n, n, n, L))
        for s in range(n):
            for d in range(n):
                if s == d:
                    continue
                for m in range(n):
                    if m != s:
                        ids, mult = self.path_arrays(s, d, m)
                        out[s, d, m, ids] = mult
        return out

    def loads_for(self, assignment: np.ndarray) -> np.ndarray:
        """Link loads when demand ``i`` (in episode order) uses middlepoint ``assignment[i]``."""
        loads = np.zeros(self.topology.n_links)
        for i in range(self.n_demands):
            ids, mult = self.path_arrays(self.src[i], self.dst[i], int(assignment[i]))
            loads[ids] += self.volume[i] * mult
        return loads

    def max_util_for(self, assignment: np.ndarray) -> float:
        return float((self.loads_for(assignment) / self.capacities).max())


@dataclass
class EnvState:
    problem: Problem
    loads: np.ndarray
    assignment: np.ndarray
    cursor: int = 0

    @property
    def done(self) -> bool:
        return self.cursor >= self.problem.n_demands

    @property
    def utilization(self) -> np.ndarray:
        return self.loads / self.problem.capacities

    def current_demand(self) -> tuple[int, int, float]:
        p = self.problem
        i = self.cursor
        return int(p.src[i]), int(p.dst[i]), float(p.volume[i])

    def loads_without_current(self) -> np.ndarray:
        """Loads with the pending demand lifted off its present path."""
        src, dst, vol = self.current_demand()
        ids, mult = self.problem.path_arrays(src, dst, int(self.assignment[self.cursor]))
        loads = self.loads.copy()
        loads[ids] -= vol * mult
        return loads

    def copy(self) -> "EnvState":
        return EnvState(self.problem, self.loads.copy(), self.assignment.copy(), self.cursor)


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    done: bool
    state: EnvState


def reset(problem: Problem) -> EnvState:
    assignment = problem.dst.copy()
    return EnvState(problem, problem.loads_for(assignment), assignment, 0)


def max_utilization(state: EnvState) -> float:
    return float((state.loads / state.problem.capacities).max())


def step(state: EnvState, m: int) -> StepOutcome:
    """Re-route the pending demand through middlepoint ``m``; mutates ``state``."""
    if state.done:
        raise EpisodeError("episode already finished")
    src, dst, vol = state.current_demand()
    if m == src or not 0 <= m < state.problem.n_nodes:
        raise EpisodeError(f"middlepoint {m} is not a valid action for source {src}")
    before = max_utilization(state)
    i = state.cursor
    old = int(state.assignment[i])
    if m != old:
        ids, mult = state.problem.path_arrays(src, dst, old)
        state.loads[ids] -= vol * mult
        ids, mult = state.problem.path_arrays(src, dst, m)
        state.loads[ids] += vol * mult
        state.assignment[i] = m
    state.cursor += 1
    after = max_utilization(state)
    return StepOutcome(before - after, state.done, state)


TRACE_COLUMNS = ["step", "src", "dst", "volume", "action", "max_util_before", "max_util_after", "reward"]


def replay(problem: Problem, actions: Iterable[int]) -> list[dict]:
    """Run ``actions`` from a fresh reset and return one trace row per step."""
    state = reset(problem)
    rows = []
    for m in actions:
        src, dst, vol = state.current_demand()
        before = max_utilization(state)
        out = step(state, int(m))
        rows.append({
            "step": len(rows), "src": src, "dst": dst, "volume": vol, "action": int(m),
            "max_util_before": before, "max_util_after": max_utilization(state), "reward": out.reward,
        })
    return rows


def write_trace(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


class RoutingEnv:
    """Gym-flavoured wrapper: ``reset()`` then ``step(m)`` until done."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.state: EnvState | None = None

    def reset(self) -> EnvState:
        self.state = reset(self.problem)
        return self.state

    def step(self, m: int) -> StepOutcome:
        if self.state is None:
            raise EpisodeError("call reset() first")
        return step(self.state, m)
