import numpy as np
import pytest

from gnnroute.env import Problem
from gnnroute.topology import Topology, bundled_topology, shortest_paths
from gnnroute.traffic import LARGE_PROFILE, generate_instance


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def random_topology(rng: np.random.Generator, n: int, extra: int | None = None) -> Topology:
    """Random connected topology: a random spanning tree plus ``extra`` cables."""
    order = rng.permutation(n)
    cables = set()
    for i in range(1, n):
        u, v = int(order[i]), int(order[rng.integers(i)])
        cables.add((min(u, v), max(u, v)))
    extra = n // 2 if extra is None else extra
    tries = 0
    while extra > 0 and tries < 100:
        u, v = (int(x) for x in rng.choice(n, 2, replace=False))
        c = (min(u, v), max(u, v))
        tries += 1
        if c not in cables:
            cables.add(c)
            extra -= 1
    return Topology.from_cables(n, sorted(cables), capacity=1.0, name="random")


K4 = Topology.from_cables(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], name="k4")
RING4_CHORD = Topology.from_cables(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], name="ring4")


def small_problem(seed: int, topo: Topology = RING4_CHORD) -> Problem:
    return Problem.from_instance(generate_instance(topo, seed, LARGE_PROFILE))


@pytest.fixture(scope="session")
def nsfnet():
    return bundled_topology("nsfnet")


@pytest.fixture(scope="session")
def nsfnet_table(nsfnet):
    return shortest_paths(nsfnet)


def sampled_grad_errors(
    f,
    params,
    rng: np.random.Generator,
    per_tensor: int = 6,
    eps: float = 1e-5,
    five_point: bool = False,
    pattern=None,
) -> dict:
    """Worst relative error between ``p.grad`` and central differences of
    ``f()`` at ``per_tensor`` random entries of every parameter tensor.

    ``five_point`` uses the fourth-order stencil. With ``pattern`` (a callable
    returning the relu sign pattern) each entry takes the largest step out of
    eps, eps/10, eps/100 whose stencil points share the unperturbed pattern,
    so no difference straddles a kink.
    """
    offsets = (1, -1, 2, -2) if five_point else (1, -1)
    base = pattern() if pattern else None
    out = {}
    for p in params:
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        num = np.empty(picks.size)
        for j, i in enumerate(picks):
            old = flat[i]
            for h in (eps, eps / 10, eps / 100):
                vals = {}
                smooth = True
                for k in offsets:
                    flat[i] = old + k * h
                    vals[k] = f()
                    if pattern and pattern() != base:
                        smooth = False
                if smooth:
                    break
            flat[i] = old
            if five_point:
                num[j] = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * h)
            else:
                num[j] = (vals[1] - vals[-1]) / (2 * h)
        out[p.name] = rel_error(p.grad.reshape(-1)[picks], num)
    return out


def random_link_graph(rng: np.random.Generator, n_links: int):
    """Random directed neighbour structure on ``n_links`` links."""
    from gnnroute.gnn import LinkGraph

    recv, send = [], []
    for l in range(n_links):
        for k in range(n_links):
            if k != l and rng.random() < 0.4:
                recv.append(l)
                send.append(k)
    return LinkGraph.from_edges(n_links, recv, send)


def relu_margin(model, h0: np.ndarray, batch) -> float:
    """Smallest |relu input| in the message layer over all rounds and in both
    readout hidden layers; finite differences are only trustworthy when the
    step moves no relu input across zero."""
    w, b = model.msg_in.weight.value, model.msg_in.bias.value
    margin = np.inf
    h, tape = model.propagate(h0, batch)
    for hr, *_ in tape:
        pre = np.hstack([hr[batch.recv], hr[batch.send]]) @ w.T + b
        margin = min(margin, float(np.abs(pre).min()))
    emb = np.add.reduceat(h, batch.offsets, axis=0)
    for layer in (model.actor_hidden, model.critic_hidden):
        margin = min(margin, float(np.abs(emb @ layer.weight.value.T + layer.bias.value).min()))
    return margin


def relu_pattern(model, h0: np.ndarray, batch) -> bytes:
    """Signs of every relu input in the model, message and readout layers."""
    h, tape = model.propagate(h0, batch)
    parts = [mask.tobytes() for _, mask, _, _ in tape]
    emb = np.add.reduceat(h, batch.offsets, axis=0)
    for layer in (model.actor_hidden, model.critic_hidden):
        parts.append((emb @ layer.weight.value.T + layer.bias.value > 0).tobytes())
    return b"".join(parts)
