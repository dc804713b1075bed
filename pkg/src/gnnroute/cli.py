"""Command-line entry point.

    gnnroute [--seed S] [--config FILE] [--out-dir DIR] [--threads K] COMMAND ...

Commands: ``gen-dataset``, ``train``, ``eval``, ``compare``, ``verify-report``.
Exit status is 0 on success, 1 for invalid input or configuration and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

from . import __version__
from .baselines import brute_force, ospf_baseline, sap, simulated_annealing
from .env import Problem
from .gnn import GnnModel
from .ppo import PpoConfig, config_to_json, evaluate, load_model, train
from .report import Row, read_rows, summarize, verify_report, write_report
from .topology import resolve_topology, shortest_paths
from .traffic import (
    Instance,
    default_total_volume,
    generate_instance,
    load_instance,
    load_tm,
    profile_for,
    save_instance,
)

log = logging.getLogger("gnnroute")

SOLVERS = ("ospf", "sap", "drl", "sa", "optimal")
DEFAULT_SOLVERS = ("ospf", "sap", "drl", "sa")

# (train, eval) instance counts per bundled topology
# (train, eval, val) instances per topology; val selects checkpoints during training
DEFAULT_DATASET = {"nsfnet": (100, 25, 10), "gbn": (0, 50, 0), "geant2": (0, 50, 0)}
DEFAULT_VAL = 10
SPLIT_OFFSET = {"train": 0, "eval": 5_000, "val": 8_000}

CONFIG_SECTIONS = {
    "dataset": {"topologies", "load_fraction"},
    "train": {"dataset", "topology", "ppo"},
    "eval": {"dataset", "checkpoint", "solvers", "topologies", "sa_steps", "sampled", "figures"},
}


class UsageError(ValueError):
    """Bad command line or configuration file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def bundled_checkpoint() -> Path:
    return Path(str(resources.files("gnnroute") / "data" / "checkpoints" / "nsfnet.json"))


# -- configuration -------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    for section, body in doc.items():
        if section not in CONFIG_SECTIONS:
            raise UsageError(f"{path}: unknown section {section!r}")
        if not isinstance(body, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        unknown = set(body) - CONFIG_SECTIONS[section]
        if unknown:
            raise UsageError(f"{path}: unknown keys in {section!r}: {sorted(unknown)}")
    return doc


def _pick(cli_value, section: dict, key: str, default=None):
    if cli_value is not None:
        return cli_value
    return section.get(key, default)


# -- dataset -------------------------------------------------------------------


def _instance_seed(seed: int, topo_idx: int, split: str, i: int) -> int:
    return seed * 1_000_000 + topo_idx * 10_000 + SPLIT_OFFSET[split] + i


def gen_dataset(
    out_dir: Path,
    counts: dict[str, tuple[int, int, int]],
    seed: int = 0,
    load_fraction: float = 0.25,
) -> dict:
    """Write calibrated instances and ``manifest.json``; returns the manifest."""
    topologies = {name: resolve_topology(name) for name in counts}
    manifest = {"seed": seed, "load_fraction": load_fraction, "topologies": {}, "instances": []}
    for t_idx, (spec, base) in enumerate(topologies.items()):
        key = base.name or Path(spec).stem
        profile = profile_for(base)
        table = shortest_paths(base)
        total = default_total_volume(base, profile, table, load_fraction)
        manifest["topologies"][key] = {
            "source": spec,
            "capacities": list(profile.candidates),
            "band": list(profile.band),
            "total_volume": total,
        }
        for split, n in zip(("train", "eval", "val"), counts[spec]):
            d = out_dir / key / split
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                s = _instance_seed(seed, t_idx, split, i)
                inst = generate_instance(base, s, profile, total, table)
                rel = Path(key) / split / f"{inst.name}.json"
                save_instance(inst, out_dir / rel)
                manifest["instances"].append({
                    "topology": key, "split": split, "file": rel.as_posix(),
                    "seed": s, "scale": inst.scale,
                })
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def load_dataset(dataset: str | Path, split: str, topologies: list[str] | None = None) -> dict[str, list[Instance]]:
    """Instances of ``split`` grouped by topology, in manifest order."""
    root = Path(dataset)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise UsageError(f"no dataset manifest at {mpath}; run gen-dataset first")
    manifest = json.loads(mpath.read_text())
    out: dict[str, list[Instance]] = {}
    for entry in manifest["instances"]:
        if entry["split"] != split or (topologies and entry["topology"] not in topologies):
            continue
        path = root / entry["file"]
        if not path.is_file():
            raise UsageError(f"dataset file {path} listed in the manifest is missing")
        out.setdefault(entry["topology"], []).append(load_instance(path))
    missing = set(topologies or ()) - set(out)
    if missing:
        raise UsageError(f"dataset has no {split} instances for {sorted(missing)}")
    return out


# -- solvers -------------------------------------------------------------------


@dataclass
class SolverSettings:
    solvers: tuple[str, ...]
    model: GnnModel | None = None
    sa_steps: int = 4_000_000
    sampled: bool = False
    seed: int = 0


def _time_drl(model: GnnModel, problem: Problem, greedy: bool, seed: int) -> tuple[float, float]:
    t0 = time.perf_counter()
    util = float(evaluate(model, [problem], greedy=greedy, seed=seed)[0])
    return util, time.perf_counter() - t0


def solve_instance(topo_name: str, inst: Instance, index: int, cfg: SolverSettings) -> list[Row]:
    problem = Problem.from_instance(inst)
    rows = []
    for solver in cfg.solvers:
        if solver == "ospf":
            a = ospf_baseline(problem)
            rows.append(Row(topo_name, inst.name, "ospf", a.max_util, seconds=a.seconds))
        elif solver == "sap":
            a = sap(problem)
            rows.append(Row(topo_name, inst.name, "sap", a.max_util, seconds=a.seconds))
        elif solver == "drl":
            seed = cfg.seed * 100_000 + index
            util, secs = _time_drl(cfg.model, problem, not cfg.sampled, seed)
            rows.append(Row(topo_name, inst.name, "drl", util, problem.n_demands,
                            seed if cfg.sampled else None, secs))
        elif solver == "sa":
            seed = cfg.seed * 100_000 + index
            a = simulated_annealing(problem, steps=cfg.sa_steps, seed=seed)
            rows.append(Row(topo_name, inst.name, "sa", a.max_util, a.steps, seed, a.seconds))
        elif solver == "optimal":
            a = brute_force(problem)
            rows.append(Row(topo_name, inst.name, "optimal", a.max_util, a.steps, seconds=a.seconds))
    return rows


def run_solvers(groups: dict[str, list[Instance]], cfg: SolverSettings, threads: int = 1) -> list[Row]:
    jobs = [(t, inst, i) for t, insts in groups.items() for i, inst in enumerate(insts)]
    if cfg.model is None and "drl" in cfg.solvers:
        raise UsageError("the drl solver needs a checkpoint")
    if "optimal" in cfg.solvers:
        for _, inst, _ in jobs:
            n = inst.topology.n_nodes
            if (n - 1) ** (n * (n - 1)) > 3**12:
                raise UsageError(f"{inst.name}: exhaustive search is limited to 4-node instances")
    work: Callable = lambda job: solve_instance(*job, cfg)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    return [r for rs in results for r in rs]


def _parse_solvers(value) -> tuple[str, ...]:
    names = value.split(",") if isinstance(value, str) else list(value)
    names = [n.strip() for n in names if n.strip()]
    bad = [n for n in names if n not in SOLVERS]
    if bad or not names:
        raise UsageError(f"unknown solver(s) {bad}; choose from {SOLVERS}")
    return tuple(dict.fromkeys(names))


def _load_checkpoint_model(path) -> GnnModel:
    p = Path(path) if path else bundled_checkpoint()
    if not p.is_file():
        raise UsageError(f"checkpoint {p} does not exist")
    try:
        return load_model(p)
    except (KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"{p}: not a model checkpoint ({e})") from None


def print_summary(rows: list[Row], stream=None) -> None:
    stream = stream or sys.stdout
    cols = ["topology", "solver", "n", "mean_max_util", "mean_ratio_to_sa", "mean_reduction_vs_ospf"]
    stream.write("\t".join(cols) + "\n")
    for rec in summarize(rows):
        stream.write("\t".join(
            "" if rec[c] is None else (f"{rec[c]:.4f}" if isinstance(rec[c], float) else str(rec[c]))
            for c in cols
        ) + "\n")


# -- commands ------------------------------------------------------------------


def cmd_gen_dataset(args, config: dict) -> int:
    section = config.get("dataset", {})
    if args.topology:
        counts = {}
        for t in args.topology:
            d_train, d_eval, d_val = DEFAULT_DATASET.get(t, (0, 50, 0))
            n_train = args.train if args.train is not None else d_train
            n_eval = args.eval if args.eval is not None else d_eval
            n_val = args.val if args.val is not None else (DEFAULT_VAL if n_train else d_val)
            counts[t] = (n_train, n_eval, n_val)
    elif "topologies" in section:
        counts = {}
        for t, v in section["topologies"].items():
            n_train = int(v.get("train", 0))
            counts[t] = (n_train, int(v.get("eval", 0)), int(v.get("val", DEFAULT_VAL if n_train else 0)))
    else:
        counts = dict(DEFAULT_DATASET)
    if any(n < 0 for c in counts.values() for n in c):
        raise UsageError("instance counts must be non-negative")
    manifest = gen_dataset(args.out_dir, counts, args.seed, float(section.get("load_fraction", 0.25)))
    print(f"wrote {len(manifest['instances'])} instances to {args.out_dir}")
    return 0


def cmd_train(args, config: dict) -> int:
    section = config.get("train", {})
    dataset = _pick(args.dataset, section, "dataset")
    if dataset is None:
        raise UsageError("train needs --dataset (or train.dataset in the config)")
    topo = _pick(args.topology, section, "topology", "nsfnet")
    ppo = dict(section.get("ppo", {}))
    if args.updates is not None:
        ppo["updates"] = args.updates
    if args.seed_given:
        ppo["seed"] = args.seed
    cfg = PpoConfig.from_dict(ppo)
    train_set = load_dataset(dataset, "train", [topo])[topo]
    # checkpoints are selected on the val split so the eval split stays unseen
    val_set = load_dataset(dataset, "val", [topo])[topo] if not args.no_eval else []
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "config.json").write_text(config_to_json(cfg) + "\n")
    result = train(
        cfg,
        [Problem.from_instance(i) for i in train_set],
        [Problem.from_instance(i) for i in val_set],
        args.out_dir,
        resume=args.resume,
        stop_after=args.stop_after,
    )
    print(f"best validation mean max utilization {result['best']:.4f} (OSPF {result['ospf']:.4f})")
    return 0


def _settings(args, section: dict) -> SolverSettings:
    solvers = _parse_solvers(_pick(args.solvers, section, "solvers", DEFAULT_SOLVERS))
    model = None
    if "drl" in solvers:
        model = _load_checkpoint_model(_pick(args.checkpoint, section, "checkpoint"))
    sa_steps = int(_pick(args.sa_steps, section, "sa_steps", 4_000_000))
    if sa_steps < 1:
        raise UsageError("sa_steps must be positive")
    sampled = bool(args.sampled or section.get("sampled", False))
    return SolverSettings(solvers, model, sa_steps, sampled, args.seed)


def cmd_eval(args, config: dict) -> int:
    section = config.get("eval", {})
    dataset = _pick(args.dataset, section, "dataset")
    if dataset is None:
        raise UsageError("eval needs --dataset (or eval.dataset in the config)")
    cfg = _settings(args, section)
    groups = load_dataset(dataset, "eval", _pick(args.topology, section, "topologies"))
    rows = run_solvers(groups, cfg, args.threads)
    write_report(rows, args.out_dir, figures=not args.no_figures and section.get("figures", True))
    print_summary(read_rows(args.out_dir / "rows.csv"))
    return 0


def cmd_compare(args, config: dict) -> int:
    section = config.get("eval", {})
    cfg = _settings(args, section)
    instances = [load_instance(p) for p in args.instance]
    if args.tm:
        if not args.topology_file:
            raise UsageError("--tm needs --topology-file (with link capacities)")
        topo = resolve_topology(args.topology_file)
        for p in args.tm:
            tm = load_tm(p)
            if tm.shape[0] != topo.n_nodes:
                raise UsageError(f"{p}: {tm.shape[0]} nodes, topology has {topo.n_nodes}")
            instances.append(Instance(topo, tm, name=Path(p).stem))
    if not instances:
        raise UsageError("compare needs --instance or --tm files")
    groups: dict[str, list[Instance]] = {}
    for inst in instances:
        groups.setdefault(inst.topology.name or "custom", []).append(inst)
    rows = run_solvers(groups, cfg, args.threads)
    write_report(rows, args.out_dir, figures=not args.no_figures)
    print_summary(read_rows(args.out_dir / "rows.csv"))
    return 0


def cmd_verify_report(args, config: dict) -> int:
    d = Path(args.report or args.out_dir)
    if not (d / "rows.csv").is_file():
        raise UsageError(f"no rows.csv in {d}")
    problems = verify_report(d)
    for p in problems:
        print(p)
    if problems:
        print(f"report {d}: {len(problems)} inconsistencies")
        return 1
    print(f"report {d}: aggregates match rows")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gnnroute", description="Middlepoint routing with a GNN policy and classical baselines.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out-dir", type=Path, default=Path("out"), help="output directory (default ./out)")
    p.add_argument("--threads", type=int, default=1, help="instances evaluated concurrently")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-dataset", help="generate calibrated traffic matrices")
    g.add_argument("--topology", action="append", help="bundled name or topology file (repeatable)")
    g.add_argument("--train", type=int, help="training instances per topology")
    g.add_argument("--eval", type=int, help="evaluation instances per topology")
    g.add_argument("--val", type=int, help="validation instances per topology (default 10 when training)")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", help="train the policy with PPO")
    t.add_argument("--dataset", help="directory written by gen-dataset")
    t.add_argument("--topology", help="dataset topology to train on (default nsfnet)")
    t.add_argument("--updates", type=int, help="override the number of PPO updates")
    t.add_argument("--resume", action="store_true", help="continue from out-dir/last.json")
    t.add_argument("--stop-after", type=int, help="stop after this many updates in this run")
    t.add_argument("--no-eval", action="store_true", help="skip validation and checkpoint selection")
    t.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "evaluate solvers on a dataset's evaluation split"),
        ("compare", cmd_compare, "run solvers on individual instance or TM files"),
    ):
        e = sub.add_parser(name, help=text)
        e.add_argument("--checkpoint", help="model checkpoint (default: bundled NSFNet model)")
        e.add_argument("--solvers", help=f"comma-separated subset of {','.join(SOLVERS)}")
        e.add_argument("--sa-steps", type=int, help="simulated annealing steps (default 4e6)")
        e.add_argument("--sampled", action="store_true", help="sample DRL actions instead of argmax")
        e.add_argument("--no-figures", action="store_true", help="skip SVG figures")
        if name == "eval":
            e.add_argument("--dataset", help="directory written by gen-dataset")
            e.add_argument("--topology", action="append", help="restrict to these topologies")
        else:
            e.add_argument("--instance", action="append", default=[], help="instance JSON file")
            e.add_argument("--tm", action="append", default=[], help="TM file (.csv or .json)")
            e.add_argument("--topology-file", help="topology for --tm files")
        e.set_defaults(func=func)

    v = sub.add_parser("verify-report", help="recompute report aggregates from rows")
    v.add_argument("report", nargs="?", help="report directory (default: --out-dir)")
    v.set_defaults(func=cmd_verify_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(message)s",
        )
        config = load_config(args.config)
        args.seed_given = args.seed is not None
        args.seed = args.seed if args.seed is not None else 0
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args, config)
    except ValueError as e:
        # configuration, topology, calibration and file-format errors
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
