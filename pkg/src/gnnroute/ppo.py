"""PPO training for the message-passing routing policy.

One update = collect ``episodes_per_update`` fresh episodes with the current
weights, then run ``epochs`` passes of shuffled mini-batches over them with
the clipped surrogate loss. The experience is dropped afterwards.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EnvState, Problem, max_utilization, reset, step
from .gnn import STATE_DIM, GnnModel, encode_actions, encode_critic, link_graph, policy
from .nn import Adam, ConfigurationError, assign_params, load_checkpoint, log_softmax, save_checkpoint, softmax

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 50
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes_per_update: int = 10
    updates: int = 100
    lr: float = 2e-4
    lr_decay: float = 0.96
    lr_decay_updates: int = 60
    eval_every: int = 5
    seed: int = 0
    rounds: int = 5
    message_hidden: int = 64
    readout_hidden: int = 64

    def __post_init__(self) -> None:
        if not 0 < self.clip < 1:
            raise ConfigurationError("clip must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigurationError("gamma and lambda must lie in (0, 1]")
        if self.minibatch < 1 or self.epochs < 1 or self.episodes_per_update < 1:
            raise ConfigurationError("minibatch, epochs and episodes_per_update must be positive")
        if self.updates < 0 or self.eval_every < 1:
            raise ConfigurationError("updates must be >= 0 and eval_every >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown PPO settings: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Episode:
    """Per-step records of one episode on ``problem_index``."""

    problem_index: int
    loads: np.ndarray  # [T, L] loads seen before each decision
    actions: np.ndarray  # index into the action set
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    version: int

    def __len__(self) -> int:
        return self.actions.size


def make_model(config: PpoConfig) -> GnnModel:
    return GnnModel(
        seed=config.seed,
        message_hidden=config.message_hidden,
        readout_hidden=config.readout_hidden,
        rounds=config.rounds,
    )


def run_episode(
    model: GnnModel,
    problem: Problem,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
    record: bool = False,
    problem_index: int = 0,
    version: int = 0,
) -> tuple[EnvState, Episode | None]:
    state = reset(problem)
    n = problem.n_demands
    if record:
        loads = np.empty((n, problem.topology.n_links))
        acts = np.empty(n, dtype=np.int64)
        logps, vals, rews = np.empty(n), np.empty(n), np.empty(n)
    t = 0
    while not state.done:
        if record:
            loads[t] = state.loads
        out = policy(model, state, rng, greedy=greedy, with_value=record)
        outcome = step(state, out.middlepoint)
        if record:
            acts[t], logps[t], vals[t], rews[t] = out.action, out.log_prob, out.value, outcome.reward
        t += 1
    if not record:
        return state, None
    dones = np.zeros(n, dtype=bool)
    dones[-1] = True
    return state, Episode(problem_index, loads, acts, logps, vals, rews, dones, version)


def collect(
    model: GnnModel,
    problems: Sequence[Problem],
    episodes: int,
    rng: np.random.Generator,
    version: int = 0,
) -> list[Episode]:
    """Sample ``episodes`` problems from the pool and play each with the stochastic policy."""
    if not problems:
        raise ValueError("empty problem pool")
    out = []
    for _ in range(episodes):
        idx = int(rng.integers(len(problems)))
        _, ep = run_episode(model, problems[idx], rng, record=True, problem_index=idx, version=version)
        out.append(ep)
    return out


def gae(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and return targets for one episode.

    The value after a terminal step is taken as zero.
    """
    n = rewards.size
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def advantages(
    episodes: Sequence[Episode], gamma: float, lam: float, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated advantages and returns; advantages optionally standardized
    over the whole batch."""
    advs, rets = [], []
    for ep in episodes:
        a, r = gae(ep.rewards, ep.values, ep.dones, gamma, lam)
        advs.append(a)
        rets.append(r)
    adv = np.concatenate(advs)
    ret = np.concatenate(rets)
    if normalize and adv.size:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


# -- loss -------------------------------------------------------------------------


def batch_inputs(
    problems: Sequence[Problem],
    problem_idx: np.ndarray,
    cursors: np.ndarray,
    loads: np.ndarray,
) -> tuple[np.ndarray, object, np.ndarray, np.ndarray, int]:
    """Stack the N-1 action graphs plus the critic graph of each record."""
    from .gnn import GraphBatch

    graphs, lgs = [], []
    n_act = None
    for pi, cur, ld in zip(problem_idx, cursors, loads):
        p = problems[pi]
        s, d, vol = int(p.src[cur]), int(p.dst[cur]), float(p.volume[cur])
        mps = [m for m in range(p.n_nodes) if m != s]
        if n_act is None:
            n_act = len(mps)
        elif n_act != len(mps):
            raise ConfigurationError("mini-batch mixes topologies with different node counts")
        wo = ld - vol * p.path_mult[s, d, d]
        graphs.append(encode_actions(p, wo, s, d, vol, mps).reshape(-1, STATE_DIM))
        graphs.append(encode_critic(p, ld))
        lgs.append(link_graph(p))
    b = len(loads)
    if all(g is lgs[0] for g in lgs):
        batch = lgs[0].tiled(b * (n_act + 1))
    else:
        per = []
        for g in lgs:
            per.extend([g] * (n_act + 1))
        batch = GraphBatch.from_graphs(per)
    per_rec = n_act + 1
    actor = (np.arange(b)[:, None] * per_rec + np.arange(n_act)[None, :]).ravel()
    critic = np.arange(b) * per_rec + n_act
    return np.concatenate(graphs, axis=0), batch, actor, critic, n_act


def ppo_loss_and_grad(
    model: GnnModel,
    h0: np.ndarray,
    batch,
    actor: np.ndarray,
    critic: np.ndarray,
    n_act: int,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    adv: np.ndarray,
    returns: np.ndarray,
    config: PpoConfig,
    backward: bool = True,
) -> dict:
    """Clipped-surrogate loss of one mini-batch; accumulates gradients when asked."""
    logits_flat, values, cache = model.forward(h0, batch, actor, critic)
    b = actions.size
    logits = logits_flat.reshape(b, n_act)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(b)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_log_probs)
    eps = config.clip
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - eps, 1 + eps) * adv
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    entropy_each = -(probs * logp_all).sum(axis=1)
    entropy = float(entropy_each.mean())
    value_loss = float(np.mean((values - returns) ** 2))
    loss = policy_loss - config.entropy_coef * entropy + config.value_coef * value_loss
    out = {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_frac": float(np.mean(np.abs(ratio - 1) > eps)),
        "approx_kl": float(np.mean(old_log_probs - logp)),
    }
    if backward:
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite PPO loss")
        # surrogate: gradient flows only where the unclipped branch is the minimum
        active = surr1 <= surr2
        dlogp = np.where(active, -adv * ratio, 0.0) / b
        onehot = np.zeros_like(logits)
        onehot[rows, actions] = 1.0
        dlogits = dlogp[:, None] * (onehot - probs)
        # entropy bonus: dH/dlogit_j = -p_j (log p_j + H)
        dlogits += config.entropy_coef / b * probs * (logp_all + entropy_each[:, None])
        dvalues = config.value_coef * 2.0 * (values - returns) / b
        model.backward(dlogits.ravel(), dvalues, cache)
    return out


def update(
    model: GnnModel,
    optimizer: Adam,
    problems: Sequence[Problem],
    episodes: Sequence[Episode],
    config: PpoConfig,
    rng: np.random.Generator,
    version: int,
) -> dict:
    """Run PPO epochs over freshly collected ``episodes``; returns mean diagnostics.

    On a non-finite loss or gradient the weights are restored to their
    pre-update values and the error propagates.
    """
    stale = [ep.version for ep in episodes if ep.version != version]
    if stale:
        raise ValueError(f"update got experience from policy versions {sorted(set(stale))}, expected {version}")
    adv, ret = advantages(episodes, config.gamma, config.gae_lambda)
    pidx = np.concatenate([np.full(len(ep), ep.problem_index) for ep in episodes])
    cursors = np.concatenate([np.arange(len(ep)) for ep in episodes])
    loads = np.concatenate([ep.loads for ep in episodes])
    actions = np.concatenate([ep.actions for ep in episodes])
    old_logp = np.concatenate([ep.log_probs for ep in episodes])
    n = actions.size
    if config.minibatch > n:
        raise ConfigurationError(f"minibatch {config.minibatch} exceeds {n} collected records")

    backup = {p.name: p.value.copy() for p in model.params}
    adam_backup = optimizer.state_dict()
    sums: dict[str, float] = {}
    count = 0
    try:
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.minibatch):
                idx = order[start : start + config.minibatch]
                h0, batch, actor, critic, n_act = batch_inputs(problems, pidx[idx], cursors[idx], loads[idx])
                optimizer.zero_grad()
                stats = ppo_loss_and_grad(
                    model, h0, batch, actor, critic, n_act,
                    actions[idx], old_logp[idx], adv[idx], ret[idx], config,
                )
                optimizer.apply()
                for k, v in stats.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
    except (FloatingPointError, ArithmeticError):
        assign_params(model.params, backup)
        optimizer.params = model.params
        optimizer.load_state_dict(adam_backup)
        raise
    return {k: v / count for k, v in sums.items()}


# -- evaluation & training loop --------------------------------------------------------


def evaluate(model: GnnModel, problems: Sequence[Problem], greedy: bool = True, seed: int = 0) -> np.ndarray:
    """Final max utilization of one episode per problem."""
    out = np.empty(len(problems))
    for i, p in enumerate(problems):
        rng = None if greedy else np.random.default_rng([seed, i])
        state, _ = run_episode(model, p, rng, greedy=greedy)
        out[i] = max_utilization(state)
    return out


METRIC_COLUMNS = [
    "update", "episodes", "mean_return", "mean_final_util",
    "eval_mean_util", "eval_p90_util", "eval_ospf_util",
    "policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl", "lr",
]


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _steps_per_update(config: PpoConfig, problems: Sequence[Problem]) -> int:
    records = config.episodes_per_update * problems[0].n_demands
    return config.epochs * math.ceil(records / config.minibatch)


def train(
    config: PpoConfig,
    train_problems: Sequence[Problem],
    eval_problems: Sequence[Problem],
    out_dir: str | Path,
    resume: bool = False,
    stop_after: int | None = None,
) -> dict:
    """Alternate collection and PPO updates, checkpointing as it goes.

    Writes ``metrics.csv`` (one row per update, plus row 0 for the initial
    weights), ``timing.csv`` (wall-clock per update), ``last.json`` (resumable
    state) and ``best.json`` (lowest held-out mean max utilization).
    ``stop_after`` ends the run early after that many updates in this call,
    leaving a resumable checkpoint, as an interrupted run would.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, timing_path = out / "metrics.csv", out / "timing.csv"
    last_path, best_path = out / "last.json", out / "best.json"

    model = make_model(config)
    optimizer = Adam(
        model.params,
        lr=config.lr,
        decay_rate=config.lr_decay,
        decay_every=config.lr_decay_updates * _steps_per_update(config, train_problems),
    )
    rng = np.random.default_rng(config.seed)
    ospf_eval = float(np.mean([max_utilization(reset(p)) for p in eval_problems])) if eval_problems else float("nan")
    start, best = 0, math.inf

    if resume and last_path.exists():
        doc = load_checkpoint(last_path)
        assign_params(model.params, doc["params"])
        optimizer.params = model.params
        optimizer.load_state_dict(doc["optimizer"])
        extra = doc["extra"]
        rng.bit_generator.state = extra["rng_state"]
        start, best = extra["update"], extra["best"]
        _truncate_csv(metrics_path, start)
        _truncate_csv(timing_path, start)
    else:
        with metrics_path.open("w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(METRIC_COLUMNS)
        with timing_path.open("w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(["update", "seconds"])

    def checkpoint(path: Path, update_idx: int) -> None:
        save_checkpoint(
            path, model.params, optimizer, seed=config.seed,
            extra={
                "update": update_idx,
                "best": best,
                "rng_state": rng.bit_generator.state,
                "config": asdict(config),
                "model": model.config(),
                "train_instances": len(train_problems),
            },
        )

    def write_row(row: dict, seconds: float) -> None:
        with metrics_path.open("a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        with timing_path.open("a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([row["update"], f"{seconds:.3f}"])

    def run_eval() -> tuple[float, float]:
        utils = evaluate(model, eval_problems, greedy=True)
        return float(utils.mean()), float(np.quantile(utils, 0.9))

    if start == 0:
        t0 = time.perf_counter()
        row = {"update": 0, "episodes": 0, "eval_ospf_util": ospf_eval, "lr": optimizer.lr}
        if eval_problems:
            row["eval_mean_util"], row["eval_p90_util"] = run_eval()
            best = row["eval_mean_util"]
            checkpoint(best_path, 0)
        write_row(row, time.perf_counter() - t0)
        checkpoint(last_path, 0)

    done_here = 0
    for u in range(start + 1, config.updates + 1):
        if stop_after is not None and done_here >= stop_after:
            break
        t0 = time.perf_counter()
        version = u - 1
        episodes = collect(model, train_problems, config.episodes_per_update, rng, version=version)
        stats = update(model, optimizer, train_problems, episodes, config, rng, version)
        row = {
            "update": u,
            "episodes": u * config.episodes_per_update,
            "mean_return": float(np.mean([ep.rewards.sum() for ep in episodes])),
            "mean_final_util": float(np.mean([
                max_utilization(reset(train_problems[ep.problem_index])) - ep.rewards.sum()
                for ep in episodes
            ])),
            "lr": optimizer.lr,
            **{k: v for k, v in stats.items() if k != "loss"},
        }
        if eval_problems and (u % config.eval_every == 0 or u == config.updates):
            row["eval_mean_util"], row["eval_p90_util"] = run_eval()
            row["eval_ospf_util"] = ospf_eval
            if row["eval_mean_util"] < best:
                best = row["eval_mean_util"]
                checkpoint(best_path, u)
        write_row(row, time.perf_counter() - t0)
        checkpoint(last_path, u)
        done_here += 1
        log.info(
            "update %d  return %.4f  eval %s  lr %.2e",
            u, row["mean_return"], row.get("eval_mean_util", "-"), row["lr"],
        )
    return {"best": best, "ospf": ospf_eval, "out_dir": str(out)}


def _truncate_csv(path: Path, last_update: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_update]
    path.write_text("".join(keep))


def load_model(path: str | Path) -> GnnModel:
    doc = load_checkpoint(path)
    cfg = doc["extra"].get("model", {})
    model = GnnModel(
        seed=0,
        state_dim=cfg.get("state_dim", STATE_DIM),
        message_hidden=cfg.get("message_hidden", 64),
        readout_hidden=cfg.get("readout_hidden", 64),
        rounds=cfg.get("rounds", 5),
    )
    assign_params(model.params, doc["params"])
    return model


def save_model(model: GnnModel, path: str | Path) -> None:
    save_checkpoint(path, model.params, extra={"model": model.config()})


def config_to_json(config: PpoConfig) -> str:
    return json.dumps(asdict(config), indent=1, sort_keys=True)
