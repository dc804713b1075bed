"""Small differentiable building blocks with hand-written backward passes.

Everything here works on float64 row batches: an input of shape ``(B, n_in)``
produces ``(B, n_out)``. ``forward`` never mutates the layer; it returns the
output together with a cache that ``backward`` consumes. ``backward``
accumulates into each parameter's ``grad`` buffer and returns the gradient
with respect to the inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised when shapes or settings are inconsistent."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient holds NaN or Inf."""

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite gradient in tensor {tensor_name!r}")
        self.tensor_name = tensor_name


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and much faster than scipy's expit here
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


_ACTIVATIONS = ("identity", "relu", "tanh")


class DenseLayer:
    """Fully-connected layer ``activation(x @ W.T + b)``."""

    def __init__(
        self,
        name: str,
        n_in: int,
        n_out: int,
        activation: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.weight = ParamTensor(f"{name}.weight", glorot_uniform(rng, n_out, n_in))
        self.bias = ParamTensor(f"{name}.bias", np.zeros(n_out))

    @property
    def params(self) -> list[ParamTensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.n_in:
            raise ConfigurationError(
                f"{self.name}: expected input width {self.n_in}, got {x.shape[-1]}"
            )
        pre = x @ self.weight.value.T + self.bias.value
        if self.activation == "relu":
            out = np.maximum(pre, 0.0)
        elif self.activation == "tanh":
            out = np.tanh(pre)
        else:
            out = pre
        cache = (x, pre, out, squeeze)
        return (out[0] if squeeze else out), cache

    def backward(self, dout: np.ndarray, cache: tuple) -> np.ndarray:
        x, pre, out, squeeze = cache
        dout = np.asarray(dout, dtype=np.float64)
        if squeeze:
            dout = dout[None, :]
        if self.activation == "relu":
            dpre = dout * (pre > 0.0)
        elif self.activation == "tanh":
            dpre = dout * (1.0 - out * out)
        else:
            dpre = dout
        self.weight.grad += dpre.T @ x
        self.bias.grad += dpre.sum(axis=0)
        dx = dpre @ self.weight.value
        return dx[0] if squeeze else dx


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)[0]


class GatedRecurrentCell:
    """GRU cell with the reset gate applied to the hidden state before the
    candidate projection::

        z  = sigmoid(Wz [h, x] + bz)
        r  = sigmoid(Wr [h, x] + br)
        n  = tanh(Wn [r * h, x] + bn)
        h' = (1 - z) * n + z * h
    """

    def __init__(
        self,
        name: str,
        hidden: int,
        n_input: int,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.hidden = hidden
        self.n_input = n_input
        width = hidden + n_input
        self.w_update = ParamTensor(f"{name}.w_update", glorot_uniform(rng, hidden, width))
        self.w_reset = ParamTensor(f"{name}.w_reset", glorot_uniform(rng, hidden, width))
        self.w_cand = ParamTensor(f"{name}.w_cand", glorot_uniform(rng, hidden, width))
        self.b_update = ParamTensor(f"{name}.b_update", np.zeros(hidden))
        self.b_reset = ParamTensor(f"{name}.b_reset", np.zeros(hidden))
        self.b_cand = ParamTensor(f"{name}.b_cand", np.zeros(hidden))

    @property
    def params(self) -> list[ParamTensor]:
        return [
            self.w_update,
            self.w_reset,
            self.w_cand,
            self.b_update,
            self.b_reset,
            self.b_cand,
        ]

    def forward(self, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h = np.asarray(h, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            h, x = h[None, :], x[None, :]
        if h.shape[-1] != self.hidden or x.shape[-1] != self.n_input:
            raise ConfigurationError(
                f"{self.name}: expected hidden {self.hidden} / input {self.n_input}, "
                f"got {h.shape[-1]} / {x.shape[-1]}"
            )
        H = self.hidden
        a = np.concatenate([h, x], axis=1)
        w_gates = np.concatenate([self.w_update.value, self.w_reset.value], axis=0)
        b_gates = np.concatenate([self.b_update.value, self.b_reset.value])
        gates = sigmoid(a @ w_gates.T + b_gates)
        z, r = gates[:, :H], gates[:, H:]
        c = np.concatenate([r * h, x], axis=1)
        n = np.tanh(c @ self.w_cand.value.T + self.b_cand.value)
        out = z * (h - n)
        out += n
        cache = (h, a, z, r, c, n, squeeze)
        return (out[0] if squeeze else out), cache

    def backward(self, dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
        h, a, z, r, c, n, squeeze = cache
        g = np.asarray(dout, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        H = self.hidden
        dn = g * (1.0 - z)
        dz = g * (h - n)
        dh = g * z

        dn_pre = dn * (1.0 - n * n)
        self.w_cand.grad += dn_pre.T @ c
        self.b_cand.grad += dn_pre.sum(axis=0)
        dc = dn_pre @ self.w_cand.value
        drh = dc[:, :H]
        dx = dc[:, H:].copy()
        dr = drh * h
        dh += drh * r

        dgates = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        dw_gates = dgates.T @ a
        db_gates = dgates.sum(axis=0)
        self.w_update.grad += dw_gates[:H]
        self.w_reset.grad += dw_gates[H:]
        self.b_update.grad += db_gates[:H]
        self.b_reset.grad += db_gates[H:]
        w_gates = np.concatenate([self.w_update.value, self.w_reset.value], axis=0)
        da = dgates @ w_gates
        dh += da[:, :H]
        dx += da[:, H:]
        if squeeze:
            return dh[0], dx[0]
        return dh, dx


def gru_step(cell: GatedRecurrentCell, hidden: np.ndarray, x: np.ndarray) -> np.ndarray:
    return cell.forward(hidden, x)[0]


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_sample(logits: Sequence[float], rng: np.random.Generator) -> tuple[int, float]:
    """Draw an index from ``softmax(logits)``; returns ``(index, log_prob)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("softmax_sample needs a non-empty 1-d logit vector")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_sample got non-finite logits")
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, logits.size - 1)
    return idx, float(logp[idx])


class Adam:
    """Adam with bias correction and a staircase exponential learning-rate decay.

    The rate used for optimizer step ``t`` (0-based) is
    ``lr0 * decay_rate ** (t // decay_every)``.
    """

    def __init__(
        self,
        params: Iterable[ParamTensor],
        lr: float = 2e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay_rate: float = 0.96,
        decay_every: int = 60,
    ):
        if lr <= 0 or not 0 < decay_rate <= 1 or decay_every < 1:
            raise ConfigurationError("invalid learning-rate schedule")
        self.params = list(params)
        self.lr0 = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_rate = decay_rate
        self.decay_every = decay_every
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    @property
    def lr(self) -> float:
        """Rate the next call to :meth:`apply` will use."""
        return self.lr0 * self.decay_rate ** (self.step_count // self.decay_every)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def apply(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.name)
        lr = self.lr
        t = self.step_count + 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**t
        corr2 = 1.0 - b2**t
        for p in self.params:
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.zero_grad()
        self.step_count = t

    def state_dict(self) -> dict[str, Any]:
        return {
            "lr0": self.lr0,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "decay_rate": self.decay_rate,
            "decay_every": self.decay_every,
            "step_count": self.step_count,
            "m": {k: _tensor_to_json(v) for k, v in self.m.items()},
            "v": {k: _tensor_to_json(v) for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.lr0 = state["lr0"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.decay_rate = state["decay_rate"]
        self.decay_every = state["decay_every"]
        self.step_count = state["step_count"]
        for k in self.m:
            self.m[k] = _tensor_from_json(state["m"][k])
            self.v[k] = _tensor_from_json(state["v"][k])


def optimizer_apply(state: Adam) -> None:
    state.apply()


# -- checkpoints ------------------------------------------------------------
# JSON floats are written with repr(), which round-trips float64 exactly.


def _tensor_to_json(a: np.ndarray) -> dict[str, Any]:
    return {"shape": list(a.shape), "values": [float(v) for v in np.ravel(a)]}


def _tensor_from_json(d: dict[str, Any]) -> np.ndarray:
    return np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(
    path: str | Path,
    params: Sequence[ParamTensor],
    optimizer: Adam | None = None,
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    doc = {
        "format": "gnnroute-checkpoint",
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "params": {p.name: _tensor_to_json(p.value) for p in params},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gnnroute-checkpoint":
        raise ConfigurationError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    doc["params"] = {k: _tensor_from_json(v) for k, v in doc["params"].items()}
    return doc


def assign_params(params: Sequence[ParamTensor], values: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in values:
            raise ConfigurationError(f"checkpoint is missing tensor {p.name!r}")
        v = values[p.name]
        if v.shape != p.value.shape:
            raise ConfigurationError(
                f"tensor {p.name!r}: checkpoint shape {v.shape} != model shape {p.value.shape}"
            )
        p.value = v.copy()
        p.grad = np.zeros_like(p.value)
