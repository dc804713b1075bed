"""Directed-link topologies, hop-count shortest paths and middlepoint paths.

Nodes are integers ``0..N-1``. Every physical cable is stored as two
directed links with their own capacity. Shortest paths use equal link weights
and a deterministic tie-break: among hop-minimal paths the one whose node
sequence is lexicographically smallest (under a configurable node ranking)
wins. There is no traffic splitting.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TopologyError(ValueError):
    """Invalid topology description or an unreachable node pair."""


@dataclass(frozen=True)
class Link:
    tail: int
    head: int
    capacity: float


class Topology:
    def __init__(self, n_nodes: int, links: Iterable[Link | tuple], name: str = ""):
        self.n_nodes = int(n_nodes)
        self.name = name
        self.links: list[Link] = [l if isinstance(l, Link) else Link(*l) for l in links]
        self.tails = np.array([l.tail for l in self.links], dtype=np.int64)
        self.heads = np.array([l.head for l in self.links], dtype=np.int64)
        self.capacities = np.array([l.capacity for l in self.links], dtype=np.float64)
        self.link_index = {(l.tail, l.head): i for i, l in enumerate(self.links)}
        self._validate()
        out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for l in self.links:
            out[l.tail].append(l.head)
        self.successors = [sorted(s) for s in out]

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_demands(self) -> int:
        return self.n_nodes * (self.n_nodes - 1)

    def _validate(self) -> None:
        n = self.n_nodes
        if n < 2:
            raise TopologyError("a topology needs at least two nodes")
        for i, l in enumerate(self.links):
            if not (0 <= l.tail < n and 0 <= l.head < n):
                raise TopologyError(f"link {i}: node id out of range 0..{n - 1}")
            if l.tail == l.head:
                raise TopologyError(f"link {i}: self-loop on node {l.tail}")
            if not l.capacity > 0 or not np.isfinite(l.capacity):
                raise TopologyError(f"link {i}: capacity must be positive, got {l.capacity}")
        if len(self.link_index) != len(self.links):
            raise TopologyError("duplicate directed link")
        for i, l in enumerate(self.links):
            if (l.head, l.tail) not in self.link_index:
                raise TopologyError(
                    f"link {i}: cable {l.tail}-{l.head} lacks its reverse direction"
                )
        # both directions exist, so weak connectivity from node 0 is enough
        seen = {0}
        stack = [0]
        adj: dict[int, list[int]] = {}
        for l in self.links:
            adj.setdefault(l.tail, []).append(l.head)
        while stack:
            u = stack.pop()
            for v in adj.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != n:
            missing = sorted(set(range(n)) - seen)
            raise TopologyError(f"topology is not connected; unreachable nodes {missing}")

    def with_capacities(self, capacities: Sequence[float]) -> "Topology":
        caps = np.asarray(capacities, dtype=np.float64)
        if caps.shape != (self.n_links,):
            raise TopologyError("capacity vector length does not match link count")
        links = [Link(l.tail, l.head, float(c)) for l, c in zip(self.links, caps)]
        return Topology(self.n_nodes, links, name=self.name)

    def relabeled(self, perm: Sequence[int], link_order: Sequence[int] | None = None) -> "Topology":
        """Topology with node ``u`` renamed ``perm[u]``; links listed in
        ``link_order`` (indices into the current link list) if given."""
        order = range(self.n_links) if link_order is None else link_order
        links = [
            Link(int(perm[self.links[i].tail]), int(perm[self.links[i].head]), self.links[i].capacity)
            for i in order
        ]
        return Topology(self.n_nodes, links, name=self.name)

    def to_dict(self) -> dict:
        doc: dict = {"nodes": self.n_nodes}
        if self.name:
            doc["name"] = self.name
        doc["links"] = [
            {"from": l.tail, "to": l.head, "capacity": l.capacity} for l in self.links
        ]
        return doc

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Topology)
            and self.n_nodes == other.n_nodes
            and self.links == other.links
        )

    def __hash__(self) -> int:
        return hash((self.n_nodes, tuple(self.links)))

    def __repr__(self) -> str:
        return f"Topology(name={self.name!r}, nodes={self.n_nodes}, links={self.n_links})"

    @classmethod
    def from_cables(
        cls, n_nodes: int, cables: Iterable[tuple[int, int]], capacity: float = 1.0, name: str = ""
    ) -> "Topology":
        links = []
        for u, v in cables:
            links.append(Link(u, v, capacity))
            links.append(Link(v, u, capacity))
        return cls(n_nodes, links, name=name)


# -- file IO ----------------------------------------------------------------


def _line_of(text: str, pattern: str, occurrence: int) -> int | None:
    for k, m in enumerate(re.finditer(pattern, text)):
        if k == occurrence:
            return text.count("\n", 0, m.start()) + 1
    return None


def parse_topology(text: str, source: str = "<string>") -> Topology:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or "nodes" not in doc or "links" not in doc:
        raise TopologyError(f"{source}:1: expected an object with 'nodes' and 'links'")
    links = []
    for i, item in enumerate(doc["links"]):
        line = _line_of(text, r'"from"', i) or 1
        try:
            links.append(Link(int(item["from"]), int(item["to"]), float(item["capacity"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TopologyError(f"{source}:{line}: malformed link entry {i} ({exc})") from None
    try:
        return Topology(int(doc["nodes"]), links, name=str(doc.get("name", "")))
    except TopologyError as exc:
        m = re.match(r"link (\d+):", str(exc))
        line = _line_of(text, r'"from"', int(m.group(1))) if m else None
        raise TopologyError(f"{source}:{line or 1}: {exc}") from None


def load_topology(path: str | Path) -> Topology:
    path = Path(path)
    return parse_topology(path.read_text(), source=str(path))


def save_topology(topology: Topology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology.to_dict(), indent=1) + "\n")


BUNDLED = ("nsfnet", "gbn", "geant2")


def bundled_topology(name: str) -> Topology:
    """One of the shipped topologies: ``nsfnet``, ``gbn`` or ``geant2``."""
    if name not in BUNDLED:
        raise TopologyError(f"unknown bundled topology {name!r}; choose from {BUNDLED}")
    ref = resources.files("gnnroute") / "data" / "topologies" / f"{name}.json"
    return parse_topology(ref.read_text(), source=f"{name}.json")


def resolve_topology(spec: str | Path) -> Topology:
    """Bundled name or path to a topology file."""
    if str(spec) in BUNDLED:
        return bundled_topology(str(spec))
    return load_topology(spec)


# -- paths --------------------------------------------------------------------


def _bfs_dist_to(topology: Topology, dst: int) -> np.ndarray:
    n = topology.n_nodes
    preds: list[list[int]] = [[] for _ in range(n)]
    for l in topology.links:
        preds[l.head].append(l.tail)
    dist = np.full(n, -1, dtype=np.int64)
    dist[dst] = 0
    q = deque([dst])
    while q:
        u = q.popleft()
        for v in preds[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


@dataclass
class PathTable:
    """Tie-broken hop-minimal path for every ordered node pair.

    ``nodes[s][d]`` is the node sequence, ``links[s][d]`` the tuple of link
    indices; both are empty for ``s == d``.
    """

    topology: Topology
    nodes: list[list[tuple[int, ...]]]
    links: list[list[tuple[int, ...]]]
    dist: np.ndarray

    def path(self, src: int, dst: int) -> tuple[int, ...]:
        return self.links[src][dst]

    def hops(self, src: int, dst: int) -> int:
        return int(self.dist[src, dst])

    @cached_property
    def middlepoint_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat CSR layout of every middlepoint path.

        Path ``(s, d, m)`` lives at slot ``(s * N + d) * N + m``; entries
        ``ptr[slot]:ptr[slot + 1]`` of ``link_ids``/``mult`` hold its distinct
        links (ascending) and traversal counts. Slots with ``s == d`` or
        ``m == s`` are empty.
        """
        n = self.topology.n_nodes
        ptr = np.zeros(n * n * n + 1, dtype=np.int64)
        ids: list[np.ndarray] = []
        mults: list[np.ndarray] = []
        for s in range(n):
            for d in range(n):
                for m in range(n):
                    slot = (s * n + d) * n + m
                    if s != d and m != s:
                        mp = middlepoint_path(self, s, d, m)
                        ids.append(mp.link_ids)
                        mults.append(mp.multiplicity)
                        ptr[slot + 1] = mp.link_ids.size
        ptr = np.cumsum(ptr)
        link_ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        mult = np.concatenate(mults) if mults else np.zeros(0, dtype=np.int64)
        return ptr, link_ids.astype(np.int64), mult.astype(np.float64)


def shortest_paths(topology: Topology, rank: Sequence[int] | None = None) -> PathTable:
    """Hop-count shortest paths with lexicographic tie-breaking.

    ``rank[u]`` orders nodes for the tie-break (default: the node id itself).
    Picking, hop by hop, the lowest-ranked neighbour that stays on a shortest
    path yields the lexicographically smallest hop-minimal sequence.
    """
    n = topology.n_nodes
    rank = list(range(n)) if rank is None else list(rank)
    succ = [sorted(s, key=lambda v: rank[v]) for s in topology.successors]
    dist = np.zeros((n, n), dtype=np.int64)
    nodes: list[list[tuple[int, ...]]] = [[() for _ in range(n)] for _ in range(n)]
    links: list[list[tuple[int, ...]]] = [[() for _ in range(n)] for _ in range(n)]
    for d in range(n):
        dd = _bfs_dist_to(topology, d)
        if np.any(dd < 0):
            raise TopologyError(f"node {int(np.argmin(dd))} cannot reach node {d}")
        dist[:, d] = dd
        for s in range(n):
            if s == d:
                continue
            seq = [s]
            u = s
            while u != d:
                u = next(v for v in succ[u] if dd[v] == dd[u] - 1)
                seq.append(u)
            nodes[s][d] = tuple(seq)
            links[s][d] = tuple(topology.link_index[(a, b)] for a, b in zip(seq, seq[1:]))
    return PathTable(topology, nodes, links, dist)


def all_shortest_paths(topology: Topology, src: int, dst: int) -> list[tuple[int, ...]]:
    """Every hop-minimal node sequence from ``src`` to ``dst``, in lexicographic order."""
    dd = _bfs_dist_to(topology, dst)
    out: list[tuple[int, ...]] = []

    def walk(u: int, seq: list[int]) -> None:
        if u == dst:
            out.append(tuple(seq))
            return
        for v in topology.successors[u]:
            if dd[v] == dd[u] - 1:
                seq.append(v)
                walk(v, seq)
                seq.pop()

    if src != dst:
        walk(src, [src])
    return out


@dataclass(frozen=True)
class MiddlepointPath:
    src: int
    dst: int
    middlepoint: int
    links: tuple[int, ...]
    link_ids: np.ndarray
    multiplicity: np.ndarray

    @property
    def n_traversals(self) -> int:
        return len(self.links)


def middlepoint_path(table: PathTable, src: int, dst: int, m: int) -> MiddlepointPath:
    """Shortest path ``src -> m`` followed by shortest path ``m -> dst``."""
    if src == dst:
        raise ValueError("a demand needs distinct endpoints")
    if m == src:
        raise ValueError("the source node cannot be a middlepoint")
    seq = table.links[src][m] + table.links[m][dst]
    ids, counts = np.unique(np.asarray(seq, dtype=np.int64), return_counts=True)
    return MiddlepointPath(src, dst, m, seq, ids, counts.astype(np.int64))


def action_set(topology: Topology, src: int) -> list[int]:
    """Middlepoint choices for a demand leaving ``src``, in fixed ascending order."""
    if not 0 <= src < topology.n_nodes:
        raise ValueError(f"node {src} not in topology")
    return [m for m in range(topology.n_nodes) if m != src]
