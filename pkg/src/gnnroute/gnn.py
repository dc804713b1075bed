"""Link-level message-passing policy/value network.

Links are the graph entities. Link ``k`` is a neighbour of link ``l`` when
``head(k) == tail(l)``, i.e. messages flow in the direction of traffic. Each
round, every link sums ``message_net([h_l, h_k])`` over its neighbours and
feeds the sum to a shared GRU cell. After ``rounds`` synchronous rounds the
link states are summed into a graph embedding, which a small MLP turns into
an action logit (actor) or a state value (critic).

Many graphs are evaluated at once as a disjoint union: the N-1 candidate
actions of a decision, the action-free critic graph, and for training a whole
mini-batch of decisions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .env import EnvState, Problem
from .nn import ConfigurationError, DenseLayer, GatedRecurrentCell, ParamTensor, log_softmax, softmax, softmax_sample
from .topology import Topology, action_set

STATE_DIM = 20
N_FEATURES = 3


class LinkGraph:
    """Neighbour structure of one topology's links."""

    def __init__(self, topology: Topology):
        tails, heads = topology.tails, topology.heads
        recv, send = [], []
        for l in range(topology.n_links):
            for k in np.flatnonzero(heads == tails[l]):
                recv.append(l)
                send.append(int(k))
        self.n_links = topology.n_links
        self.recv = np.asarray(recv, dtype=np.int64)
        self.send = np.asarray(send, dtype=np.int64)

    @classmethod
    def from_edges(cls, n_links: int, recv, send) -> "LinkGraph":
        g = cls.__new__(cls)
        g.n_links = n_links
        g.recv = np.asarray(recv, dtype=np.int64)
        g.send = np.asarray(send, dtype=np.int64)
        return g

    @lru_cache(maxsize=16)
    def tiled(self, copies: int) -> "GraphBatch":
        return GraphBatch.from_graphs([self] * copies)


@dataclass
class GraphBatch:
    n_graphs: int
    n_links: int
    offsets: np.ndarray  # first link of each graph, length n_graphs
    graph_of_link: np.ndarray
    recv: np.ndarray
    send: np.ndarray
    deg: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: list[LinkGraph]) -> "GraphBatch":
        sizes = np.array([g.n_links for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        recv = np.concatenate([g.recv + o for g, o in zip(graphs, offsets)])
        send = np.concatenate([g.send + o for g, o in zip(graphs, offsets)])
        total = int(sizes.sum())
        return cls(
            n_graphs=len(graphs),
            n_links=total,
            offsets=offsets,
            graph_of_link=np.repeat(np.arange(len(graphs)), sizes),
            recv=recv,
            send=send,
            deg=np.bincount(recv, minlength=total).astype(np.float64),
        )


@njit(cache=True)
def _edge_forward(p_self, p_nbr, bias, recv, send, mask, summed):
    # summed[l] = sum over edges (l <- k) of relu(p_self[l] + p_nbr[k] + bias)
    summed[:] = 0.0
    width = bias.size
    for e in range(recv.size):
        l = recv[e]
        k = send[e]
        for j in range(width):
            v = p_self[l, j] + p_nbr[k, j] + bias[j]
            if v > 0.0:
                mask[e, j] = 1
                summed[l, j] += v
            else:
                mask[e, j] = 0


@njit(cache=True)
def _edge_backward(dsummed, mask, recv, send, dp_self, dp_nbr, dbias):
    width = dbias.size
    for e in range(recv.size):
        l = recv[e]
        k = send[e]
        for j in range(width):
            if mask[e, j]:
                g = dsummed[l, j]
                dp_self[l, j] += g
                dp_nbr[k, j] += g
                dbias[j] += g


class GnnModel:
    def __init__(
        self,
        seed: int = 0,
        state_dim: int = STATE_DIM,
        message_hidden: int = 64,
        readout_hidden: int = 64,
        rounds: int = 5,
    ):
        rng = np.random.default_rng(seed)
        self.state_dim = state_dim
        self.rounds = rounds
        self.msg_in = DenseLayer("message.0", 2 * state_dim, message_hidden, "relu", rng)
        self.msg_out = DenseLayer("message.1", message_hidden, state_dim, "identity", rng)
        self.cell = GatedRecurrentCell("update", state_dim, state_dim, rng)
        self.actor_hidden = DenseLayer("actor.0", state_dim, readout_hidden, "relu", rng)
        self.actor_out = DenseLayer("actor.1", readout_hidden, 1, "identity", rng)
        self.critic_hidden = DenseLayer("critic.0", state_dim, readout_hidden, "relu", rng)
        self.critic_out = DenseLayer("critic.1", readout_hidden, 1, "identity", rng)

    @property
    def params(self) -> list[ParamTensor]:
        out: list[ParamTensor] = []
        for layer in (self.msg_in, self.msg_out, self.cell, self.actor_hidden,
                      self.actor_out, self.critic_hidden, self.critic_out):
            out.extend(layer.params)
        return out

    def config(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "message_hidden": self.msg_in.n_out,
            "readout_hidden": self.actor_hidden.n_out,
            "rounds": self.rounds,
            "feature_scale": "max_link_capacity",
        }

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # -- message passing -----------------------------------------------------

    def propagate(self, h0: np.ndarray, batch: GraphBatch) -> tuple[np.ndarray, list]:
        """Run ``rounds`` synchronous message-passing rounds from states ``h0``."""
        if h0.shape != (batch.n_links, self.state_dim):
            raise ConfigurationError(
                f"expected link states of shape {(batch.n_links, self.state_dim)}, got {h0.shape}"
            )
        d = self.state_dim
        w1 = self.msg_in.weight.value
        w_self, w_nbr = w1[:, :d], w1[:, d:]
        b1 = self.msg_in.bias.value
        w2, b2 = self.msg_out.weight.value, self.msg_out.bias.value
        h = h0
        tape = []
        n_hidden = b1.size
        w_stack = np.concatenate([w_self, w_nbr], axis=0)
        for _ in range(self.rounds):
            # message_net([h_l, h_k]) = W2 relu(Wself h_l + Wnbr h_k + b1) + b2; the
            # outer layer is linear, so the neighbour sum can be taken first
            proj = h @ w_stack.T
            p_self, p_nbr = proj[:, :n_hidden], proj[:, n_hidden:]
            mask = np.empty((batch.recv.size, n_hidden), dtype=np.uint8)
            summed = np.empty((batch.n_links, n_hidden))
            _edge_forward(p_self, p_nbr, b1, batch.recv, batch.send, mask, summed)
            msg = summed @ w2.T + batch.deg[:, None] * b2
            h_new, cell_cache = self.cell.forward(h, msg)
            tape.append((h, mask, summed, cell_cache))
            h = h_new
        return h, tape

    def propagate_backward(self, dh: np.ndarray, batch: GraphBatch, tape: list) -> np.ndarray:
        d = self.state_dim
        w1 = self.msg_in.weight.value
        w_self, w_nbr = w1[:, :d], w1[:, d:]
        w2 = self.msg_out.weight.value
        n_hidden = w1.shape[0]
        w_stack = np.concatenate([w_self, w_nbr], axis=0)
        for h, mask, summed, cell_cache in reversed(tape):
            dh_prev, dmsg = self.cell.backward(dh, cell_cache)
            self.msg_out.weight.grad += dmsg.T @ summed
            self.msg_out.bias.grad += batch.deg @ dmsg
            dsummed = dmsg @ w2
            dproj = np.zeros((summed.shape[0], 2 * n_hidden))
            dp_self, dp_nbr = dproj[:, :n_hidden], dproj[:, n_hidden:]
            _edge_backward(dsummed, mask, batch.recv, batch.send, dp_self, dp_nbr, self.msg_in.bias.grad)
            dw = dproj.T @ h
            self.msg_in.weight.grad[:, :d] += dw[:n_hidden]
            self.msg_in.weight.grad[:, d:] += dw[n_hidden:]
            dh = dh_prev + dproj @ w_stack
        return dh

    # -- full forward / backward ----------------------------------------------

    def forward(
        self,
        h0: np.ndarray,
        batch: GraphBatch,
        actor_graphs: np.ndarray,
        critic_graphs: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray, tuple]:
        """Logits for ``actor_graphs`` and values for ``critic_graphs``."""
        h, tape = self.propagate(h0, batch)
        emb = np.add.reduceat(h, batch.offsets, axis=0)
        logits = values = np.zeros(0)
        a_cache = c_cache = None
        if len(actor_graphs):
            z, c1 = self.actor_hidden.forward(emb[actor_graphs])
            out, c2 = self.actor_out.forward(z)
            logits, a_cache = out[:, 0], (c1, c2)
        if len(critic_graphs):
            z, c1 = self.critic_hidden.forward(emb[critic_graphs])
            out, c2 = self.critic_out.forward(z)
            values, c_cache = out[:, 0], (c1, c2)
        return logits, values, (batch, tape, actor_graphs, critic_graphs, a_cache, c_cache)

    def backward(self, dlogits: np.ndarray, dvalues: np.ndarray, cache: tuple) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. ``h0``."""
        batch, tape, actor_graphs, critic_graphs, a_cache, c_cache = cache
        demb = np.zeros((batch.n_graphs, self.state_dim))
        if a_cache is not None:
            c1, c2 = a_cache
            dz = self.actor_out.backward(np.asarray(dlogits)[:, None], c2)
            np.add.at(demb, actor_graphs, self.actor_hidden.backward(dz, c1))
        if c_cache is not None:
            c1, c2 = c_cache
            dz = self.critic_out.backward(np.asarray(dvalues)[:, None], c2)
            np.add.at(demb, critic_graphs, self.critic_hidden.backward(dz, c1))
        dh = demb[batch.graph_of_link]
        return self.propagate_backward(dh, batch, tape)


def message_passing(model: GnnModel, inputs: np.ndarray, graph: LinkGraph) -> np.ndarray:
    """Final link states of one graph; ``inputs`` is ``[links, features<=state_dim]``."""
    return model.propagate(pad_inputs(inputs, model.state_dim), graph.tiled(1))[0]


def pad_inputs(features: np.ndarray, width: int = STATE_DIM) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    out = np.zeros(features.shape[:-1] + (width,))
    out[..., : features.shape[-1]] = features
    return out


# -- state encoding --------------------------------------------------------------


def base_features(problem: Problem, loads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    caps = problem.capacities
    return caps / caps.max(), loads / caps


def encode_actions(
    problem: Problem,
    loads_wo: np.ndarray,
    src: int,
    dst: int,
    volume: float,
    middlepoints: list[int] | np.ndarray,
) -> np.ndarray:
    """``[len(middlepoints), L, 20]`` link inputs, one graph per candidate.

    ``loads_wo`` are link loads with the pending demand removed.
    """
    x1, x2 = base_features(problem, loads_wo)
    caps_max = problem.capacities.max()
    mps = np.asarray(middlepoints, dtype=np.int64)
    out = np.zeros((mps.size, problem.topology.n_links, STATE_DIM))
    out[:, :, 0] = x1
    out[:, :, 1] = x2
    out[:, :, 2] = problem.path_mult[src, dst, mps] * (volume / caps_max)
    return out


def encode_action(state: EnvState, m: int) -> np.ndarray:
    src, dst, vol = state.current_demand()
    if m == src:
        raise ValueError("source node is not a middlepoint")
    return encode_actions(state.problem, state.loads_without_current(), src, dst, vol, [m])[0]


def encode_critic(problem: Problem, loads: np.ndarray) -> np.ndarray:
    x1, x2 = base_features(problem, loads)
    out = np.zeros((problem.topology.n_links, STATE_DIM))
    out[:, 0] = x1
    out[:, 1] = x2
    return out


_LINK_GRAPHS: dict[tuple, LinkGraph] = {}


def link_graph(problem: Problem) -> LinkGraph:
    """Shared :class:`LinkGraph` for every problem with the same link layout."""
    topo = problem.topology
    key = (topo.n_links, topo.tails.tobytes(), topo.heads.tobytes())
    g = _LINK_GRAPHS.get(key)
    if g is None:
        g = _LINK_GRAPHS[key] = LinkGraph(topo)
    return g


def decision_inputs(state: EnvState, with_critic: bool = True) -> tuple[np.ndarray, list[int]]:
    """Stacked link inputs for all candidate actions (plus the critic graph)."""
    src, dst, vol = state.current_demand()
    mps = action_set(state.problem.topology, src)
    graphs = encode_actions(state.problem, state.loads_without_current(), src, dst, vol, mps)
    if with_critic:
        graphs = np.concatenate([graphs, encode_critic(state.problem, state.loads)[None]], axis=0)
    return graphs, mps


def evaluate_action(model: GnnModel, state: EnvState, m: int) -> float:
    x = encode_action(state, m)
    batch = link_graph(state.problem).tiled(1)
    logits, _, _ = model.forward(x, batch, np.array([0]), np.zeros(0, dtype=np.int64))
    return float(logits[0])


@dataclass
class PolicyOutput:
    logits: np.ndarray
    probs: np.ndarray
    middlepoints: list[int]
    action: int  # index into middlepoints
    log_prob: float
    value: float

    @property
    def middlepoint(self) -> int:
        return self.middlepoints[self.action]


def policy(
    model: GnnModel,
    state: EnvState,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
    with_value: bool = True,
) -> PolicyOutput:
    """Score every middlepoint for the pending demand and pick one.

    Samples from the softmax when ``greedy`` is false (``rng`` required),
    otherwise takes the argmax (first index on ties).
    """
    if state.done:
        raise ValueError("episode is finished")
    graphs, mps = decision_inputs(state, with_critic=with_value)
    n_act = len(mps)
    batch = link_graph(state.problem).tiled(graphs.shape[0])
    logits, values, _ = model.forward(
        graphs.reshape(-1, STATE_DIM),
        batch,
        np.arange(n_act),
        np.array([n_act]) if with_value else np.zeros(0, dtype=np.int64),
    )
    probs = softmax(logits)
    if greedy:
        idx = int(np.argmax(logits))
        logp = float(log_softmax(logits)[idx])
    else:
        if rng is None:
            raise ValueError("sampling needs a random generator")
        idx, logp = softmax_sample(logits, rng)
    value = float(values[0]) if with_value else float("nan")
    return PolicyOutput(logits, probs, mps, idx, logp, value)
