"""Evaluation reports: per-instance rows, aggregates, CDF points and figures.

A report directory holds

* ``rows.csv``     one row per (topology, instance, solver)
* ``summary.csv``  per (topology, solver) aggregates, recomputable from rows
* ``cdf.csv``      empirical CDF points of each solver's ratio to SA
* ``timing.csv``   wall-clock seconds per row

Wall-clock lives in its own file so that everything else is a pure function
of the inputs and reruns are byte-identical.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

ROW_COLUMNS = ["topology", "instance", "solver", "max_util", "ratio_to_sa", "steps", "seed"]
SUMMARY_COLUMNS = [
    "topology", "solver", "n", "mean_max_util", "p90_max_util",
    "mean_ratio_to_sa", "mean_reduction_vs_ospf",
]
CDF_COLUMNS = ["topology", "solver", "value", "fraction"]
TIMING_COLUMNS = ["topology", "instance", "solver", "seconds"]

SOLVER_ORDER = ["ospf", "sap", "drl", "sa", "optimal"]


@dataclass
class Row:
    topology: str
    instance: str
    solver: str
    max_util: float
    steps: int = 0
    seed: int | None = None
    seconds: float = 0.0
    ratio_to_sa: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _solver_key(name: str) -> tuple[int, str]:
    return (SOLVER_ORDER.index(name) if name in SOLVER_ORDER else len(SOLVER_ORDER), name)


def attach_ratios(rows: list[Row]) -> None:
    """Set ``ratio_to_sa`` against the SA row of the same instance, if any."""
    sa = {(r.topology, r.instance): r.max_util for r in rows if r.solver == "sa"}
    for r in rows:
        ref = sa.get((r.topology, r.instance))
        r.ratio_to_sa = None if ref is None else r.max_util / ref


def summarize(rows: Iterable[Row]) -> list[dict]:
    """Per (topology, solver) aggregates.

    ``mean_reduction_vs_ospf`` is the mean over instances of
    ``1 - max_util / ospf_max_util``.
    """
    rows = list(rows)
    ospf = {(r.topology, r.instance): r.max_util for r in rows if r.solver == "ospf"}
    groups: dict[tuple[str, str], list[Row]] = defaultdict(list)
    for r in rows:
        groups[r.topology, r.solver].append(r)
    out = []
    for (topo, solver) in sorted(groups, key=lambda k: (k[0], _solver_key(k[1]))):
        g = groups[topo, solver]
        util = np.array([r.max_util for r in g])
        ratios = [r.ratio_to_sa for r in g]
        red = [1.0 - r.max_util / ospf[topo, r.instance] for r in g if (topo, r.instance) in ospf]
        out.append({
            "topology": topo,
            "solver": solver,
            "n": len(g),
            "mean_max_util": float(util.mean()),
            "p90_max_util": float(np.quantile(util, 0.9)),
            "mean_ratio_to_sa": float(np.mean(ratios)) if all(x is not None for x in ratios) else None,
            "mean_reduction_vs_ospf": float(np.mean(red)) if len(red) == len(g) else None,
        })
    return out


def cdf_points(rows: Iterable[Row]) -> list[dict]:
    """Empirical CDF of each solver's ratio to SA (max util when SA is absent)."""
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in rows:
        groups[r.topology, r.solver].append(r.max_util if r.ratio_to_sa is None else r.ratio_to_sa)
    out = []
    for (topo, solver) in sorted(groups, key=lambda k: (k[0], _solver_key(k[1]))):
        values = np.sort(groups[topo, solver])
        n = values.size
        for i, v in enumerate(values):
            out.append({"topology": topo, "solver": solver, "value": float(v), "fraction": (i + 1) / n})
    return out


def _write(path: Path, columns: list[str], records: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in columns])


def _row_dict(r: Row) -> dict:
    return {c: getattr(r, c) for c in ROW_COLUMNS}


def write_report(rows: list[Row], out_dir: str | Path, figures: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.topology, r.instance, _solver_key(r.solver)))
    attach_ratios(rows)
    _write(out / "rows.csv", ROW_COLUMNS, map(_row_dict, rows))
    _write(out / "summary.csv", SUMMARY_COLUMNS, summarize(rows))
    _write(out / "cdf.csv", CDF_COLUMNS, cdf_points(rows))
    _write(out / "timing.csv", TIMING_COLUMNS, (
        {"topology": r.topology, "instance": r.instance, "solver": r.solver, "seconds": r.seconds}
        for r in rows
    ))
    if figures:
        render_figures(rows, out)
    return out


def _parse(v: str, kind):
    if v == "":
        return None
    return kind(v)


def read_rows(path: str | Path) -> list[Row]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ROW_COLUMNS:
            raise ValueError(f"{path}: expected columns {ROW_COLUMNS}, got {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(Row(
                rec["topology"], rec["instance"], rec["solver"], float(rec["max_util"]),
                int(rec["steps"]), _parse(rec["seed"], int),
                ratio_to_sa=_parse(rec["ratio_to_sa"], float),
            ))
    return rows


def _read_table(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh)]


def verify_report(report_dir: str | Path) -> list[str]:
    """Recompute ratios, aggregates and CDF points from ``rows.csv``.

    Returns a list of human-readable mismatches (empty when consistent).
    """
    d = Path(report_dir)
    rows = read_rows(d / "rows.csv")
    problems = []
    stored = [r.ratio_to_sa for r in rows]
    attach_ratios(rows)
    for r, s in zip(rows, stored):
        if r.ratio_to_sa != s:
            problems.append(f"rows.csv: ratio_to_sa for {r.topology}/{r.instance}/{r.solver} is {s}, expected {r.ratio_to_sa}")
    for name, columns, records in (
        ("summary.csv", SUMMARY_COLUMNS, summarize(rows)),
        ("cdf.csv", CDF_COLUMNS, cdf_points(rows)),
    ):
        expected = [columns] + [[_fmt(rec[c]) for c in columns] for rec in records]
        got = _read_table(d / name)
        if len(got) != len(expected):
            problems.append(f"{name}: {len(got) - 1} data lines, expected {len(expected) - 1}")
            continue
        for i, (a, b) in enumerate(zip(got, expected)):
            if a != b:
                problems.append(f"{name} line {i + 1}: {a} != recomputed {b}")
    return problems


def render_figures(rows: list[Row], out_dir: str | Path) -> list[Path]:
    """CDF and box plots per topology, written as SVG.

    SVG ids are salted with a fixed string and the date stamp is dropped, so
    the files are reproducible byte for byte.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    written = []
    by_topo: dict[str, list[Row]] = defaultdict(list)
    for r in rows:
        by_topo[r.topology].append(r)
    with matplotlib.rc_context({"svg.hashsalt": "gnnroute", "font.size": 9}):
        for topo, group in sorted(by_topo.items()):
            has_sa = any(r.ratio_to_sa is not None for r in group)
            series: dict[str, list[float]] = defaultdict(list)
            for r in group:
                series[r.solver].append(r.ratio_to_sa if has_sa and r.ratio_to_sa is not None else r.max_util)
            names = sorted(series, key=_solver_key)
            if has_sa:
                names = [n for n in names if n != "sa"] or names
            label = "max utilization / SA" if has_sa else "max utilization"

            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            for name in names:
                v = np.sort(series[name])
                ax.step(v, np.arange(1, v.size + 1) / v.size, where="post", label=name)
            ax.set_xlabel(label)
            ax.set_ylabel("fraction of instances")
            ax.set_title(topo)
            ax.grid(alpha=0.3)
            ax.legend(frameon=False)
            fig.tight_layout()
            path = out / f"cdf-{topo}.svg"
            fig.savefig(path, metadata={"Date": None})
            plt.close(fig)
            written.append(path)

            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            ax.boxplot([series[n] for n in names])
            ax.set_xticks(range(1, len(names) + 1), names)
            ax.set_ylabel(label)
            ax.set_title(topo)
            ax.grid(alpha=0.3, axis="y")
            fig.tight_layout()
            path = out / f"box-{topo}.svg"
            fig.savefig(path, metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
