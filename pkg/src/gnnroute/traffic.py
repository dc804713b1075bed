"""Gravity-model traffic matrices and capacity calibration.

Volumes are kept on a binary fixed-point grid: every entry of a matrix is a
multiple of a power of two about 2^-40 times its largest entry. Any sum of
link loads is then exact in float64, independent of summation order, which is
what lets incremental load bookkeeping match a from-scratch recomputation bit
for bit.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .topology import PathTable, Topology, shortest_paths

GRID_BITS = 40


class CalibrationError(ValueError):
    pass


def grid_step(magnitude: float) -> float:
    """Grid spacing for values up to ``magnitude``."""
    if not magnitude > 0:
        return 1.0
    return math.ldexp(1.0, math.frexp(magnitude)[1] - GRID_BITS)


def quantize(x: np.ndarray, mode: str = "nearest") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    step = grid_step(float(np.max(np.abs(x), initial=0.0)))
    scaled = x / step
    if mode == "ceil":
        scaled = np.ceil(scaled)
    elif mode == "floor":
        scaled = np.floor(scaled)
    else:
        scaled = np.round(scaled)
    return scaled * step


@dataclass(frozen=True)
class CapacityProfile:
    candidates: tuple[float, ...]
    band: tuple[float, float] = (0.95, 1.3)

    def __post_init__(self) -> None:
        c = self.candidates
        if not c or any(b <= a for a, b in zip(c, c[1:])) or c[0] <= 0:
            raise ValueError("capacity candidates must be positive and strictly increasing")
        if not self.band[0] < self.band[1]:
            raise ValueError("band lower bound must be below the upper bound")


NSFNET_PROFILE = CapacityProfile((5000.0, 10000.0, 15000.0, 20000.0))
LARGE_PROFILE = CapacityProfile((25000.0, 50000.0, 75000.0, 100000.0))


def profile_for(topology: Topology) -> CapacityProfile:
    return NSFNET_PROFILE if topology.name.lower() == "nsfnet" else LARGE_PROFILE


def gravity_tm(
    topology: Topology,
    total_volume: float,
    rng: np.random.Generator,
    masses: Sequence[float] | None = None,
) -> np.ndarray:
    """Gravity traffic matrix with Exponential(1) node masses.

    ``T[s, d] = total_volume * w_s * w_d / sum_{i != j} w_i * w_j``.
    """
    if not total_volume > 0:
        raise ValueError("total_volume must be positive")
    n = topology.n_nodes
    w = rng.exponential(1.0, size=n) if masses is None else np.asarray(masses, dtype=np.float64)
    outer = np.outer(w, w)
    np.fill_diagonal(outer, 0.0)
    norm = outer.sum()
    if norm <= 0:
        return np.zeros((n, n))
    return quantize(total_volume * outer / norm)


def ospf_loads(table: PathTable, tm: np.ndarray) -> np.ndarray:
    n = table.topology.n_nodes
    loads = np.zeros(table.topology.n_links)
    for s in range(n):
        for d in range(n):
            if s != d and tm[s, d] != 0.0:
                loads[list(table.links[s][d])] += tm[s, d]
    return loads


def _select_capacities(loads: np.ndarray, profile: CapacityProfile) -> np.ndarray:
    cands = np.asarray(profile.candidates)
    hi = profile.band[1]
    caps = np.empty_like(loads)
    for i, load in enumerate(loads):
        ok = cands[load / cands <= hi]
        caps[i] = ok[0] if ok.size else cands[-1]
    return caps


def assign_capacities(
    topology: Topology,
    tm: np.ndarray,
    profile: CapacityProfile,
    table: PathTable | None = None,
) -> tuple[Topology, np.ndarray, float]:
    """Pick per-link capacities, then rescale the matrix into the utilization band.

    Each link gets the smallest candidate whose OSPF utilization stays within
    the band's upper bound (the largest candidate if none does). If the
    resulting maximum utilization is still outside the band, the whole matrix
    is scaled by ``bound / max_util`` and capacities are re-selected.

    Returns ``(topology_with_capacities, scaled_tm, scale_factor)``.
    """
    table = table if table is not None else shortest_paths(topology)
    tm = np.asarray(tm, dtype=np.float64)
    lo, hi = profile.band
    loads = ospf_loads(table, tm)
    if loads.max() <= 0:
        raise CalibrationError("traffic matrix puts no load on any link")
    caps = _select_capacities(loads, profile)
    util = float((loads / caps).max())
    if lo <= util <= hi:
        return topology.with_capacities(caps), tm.copy(), 1.0

    target = hi if util > hi else lo
    scale = target / util
    mode = "floor" if util > hi else "ceil"
    for _ in range(8):
        scaled = quantize(tm * scale, mode)
        loads = ospf_loads(table, scaled)
        caps = _select_capacities(loads, profile)
        new_util = float((loads / caps).max())
        if lo <= new_util <= hi:
            return topology.with_capacities(caps), scaled, scale
        # float rounding pushed us a hair outside; nudge toward the interior
        scale *= (1 - 1e-12) if new_util > hi else (1 + 1e-12)
    raise CalibrationError(f"could not bring max utilization into {profile.band}")


def default_total_volume(
    topology: Topology,
    profile: CapacityProfile,
    table: PathTable | None = None,
    load_fraction: float = 0.25,
) -> float:
    """Total volume whose mean OSPF link load is ``load_fraction`` of the mean
    candidate capacity.

    At the default fraction the heavy-tailed gravity loads land in the band
    through per-link capacity choice alone for nearly every draw, so the final
    rescaling step is rarely needed.
    """
    table = table if table is not None else shortest_paths(topology)
    n = topology.n_nodes
    mean_hops = table.dist.sum() / (n * (n - 1))
    return float(load_fraction * np.mean(profile.candidates) * topology.n_links / mean_hops)


@dataclass
class Instance:
    """A calibrated problem: capacitated topology plus traffic matrix."""

    topology: Topology
    tm: np.ndarray
    seed: int | None = None
    scale: float = 1.0
    name: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "scale": self.scale,
            "topology": self.topology.to_dict(),
            "tm": [[float(v) for v in row] for row in self.tm],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Instance":
        from .topology import parse_topology

        topo = parse_topology(json.dumps(doc["topology"]))
        tm = np.asarray(doc["tm"], dtype=np.float64)
        validate_tm(tm, topo.n_nodes)
        return cls(topo, tm, doc.get("seed"), doc.get("scale", 1.0), doc.get("name", ""))


def validate_tm(tm: np.ndarray, n_nodes: int) -> None:
    if tm.shape != (n_nodes, n_nodes):
        raise ValueError(f"traffic matrix must be {n_nodes}x{n_nodes}, got {tm.shape}")
    if np.any(tm < 0) or not np.all(np.isfinite(tm)):
        raise ValueError("traffic volumes must be finite and non-negative")
    if np.any(np.diag(tm) != 0):
        raise ValueError("traffic matrix diagonal must be zero")


def generate_instance(
    base: Topology,
    seed: int,
    profile: CapacityProfile | None = None,
    total_volume: float | None = None,
    table: PathTable | None = None,
) -> Instance:
    profile = profile or profile_for(base)
    table = table if table is not None else shortest_paths(base)
    total = total_volume if total_volume is not None else default_total_volume(base, profile, table)
    rng = np.random.default_rng(seed)
    tm = gravity_tm(base, total, rng)
    topo, tm, scale = assign_capacities(base, tm, profile, table)
    return Instance(topo, tm, seed, scale, name=f"{base.name or 'topo'}-{seed}")


def save_instance(instance: Instance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(instance.to_dict(), sort_keys=True) + "\n")


def load_instance(path: str | Path) -> Instance:
    return Instance.from_dict(json.loads(Path(path).read_text()))


def tm_to_csv(tm: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in tm:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def tm_from_csv(text: str) -> np.ndarray:
    rows = [list(map(float, r)) for r in csv.reader(io.StringIO(text)) if r]
    tm = np.asarray(rows, dtype=np.float64)
    validate_tm(tm, tm.shape[0])
    return tm


def load_tm(path: str | Path) -> np.ndarray:
    """TM from a ``.csv`` file or a JSON document ``{"matrix": [[...]]}``."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        return tm_from_csv(text)
    doc = json.loads(text)
    tm = np.asarray(doc["matrix"] if isinstance(doc, dict) else doc, dtype=np.float64)
    validate_tm(tm, tm.shape[0])
    return tm


def save_tm(tm: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        path.write_text(tm_to_csv(tm))
    else:
        path.write_text(json.dumps({"nodes": int(tm.shape[0]), "matrix": [[float(v) for v in r] for r in tm]}) + "\n")


def is_on_grid(tm: np.ndarray) -> bool:
    tm = np.asarray(tm, dtype=np.float64)
    if not np.all(np.isfinite(tm)):
        return False
    # rounding can carry the largest entry across a power of two; allow the finer step
    scaled = tm / (grid_step(float(np.max(np.abs(tm), initial=0.0))) / 2)
    return bool(np.all(scaled == np.round(scaled)))
