"""Small reverse-mode dense network stack used by the generative classifier.

Everything is float64 numpy. A forward pass returns a :class:`Tape` that
``backward`` consumes; inputs may be a single vector or a batch of row
vectors, in which case parameter gradients are summed over the batch.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

RELU = "relu"
IDENTITY = "identity"
LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_FORMAT = "genids-checkpoint"
CHECKPOINT_VERSION = 1


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or infinite values."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = RELU


class DenseNet:
    """Fully-connected stack; hidden layers use ReLU, the head is Identity."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("a DenseNet needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].weight.shape[1] != layers[i - 1].weight.shape[0]:
                raise ValueError(f"layer {i} input dim does not chain with layer {i - 1}")
        for i, layer in enumerate(layers):
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ValueError(f"layer {i} bias shape {layer.bias.shape} does not match weight")
            if layer.activation not in (RELU, IDENTITY):
                raise ValueError(f"unknown activation {layer.activation!r}")
        # all parameters live in one flat buffer; layer arrays are views into it
        self.flat = np.concatenate([a.ravel() for l in layers for a in (l.weight, l.bias)]).astype(np.float64)
        self.layers = []
        pos = 0
        for l in layers:
            w_size, b_size = l.weight.size, l.bias.size
            w = self.flat[pos:pos + w_size].reshape(l.weight.shape)
            b = self.flat[pos + w_size:pos + w_size + b_size]
            pos += w_size + b_size
            self.layers.append(Layer(w, b, l.activation))
        # bumped whenever parameters change so stale tapes can be detected
        self.version = 0

    @classmethod
    def create(cls, input_dim: int, hidden: Sequence[int], output_dim: int,
               rng: np.random.Generator) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        sizes = [input_dim, *hidden, output_dim]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = IDENTITY if i == len(sizes) - 2 else RELU
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def named_params(self, prefix: str) -> Dict[str, np.ndarray]:
        named = {}
        for i, layer in enumerate(self.layers):
            named[f"{prefix}.{i}.weight"] = layer.weight
            named[f"{prefix}.{i}.bias"] = layer.bias
        return named

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def n_params(self) -> int:
        return self.flat.size

    def flatten_grads(self, grads: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([g.ravel() for g in grads])


@dataclass
class Tape:
    net_id: int
    version: int
    batched: bool
    inputs: List[np.ndarray]  # input to each layer
    pre: List[np.ndarray]  # pre-activations of each layer


def forward(net: DenseNet, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ValueError(f"input has shape {x.shape}, network expects {net.input_dim} features")
    inputs, pre = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in net.layers:
            inputs.append(h)
            a = h @ layer.weight.T
            a += layer.bias
            pre.append(a)
            h = np.maximum(a, 0.0) if layer.activation == RELU else a
    if not np.isfinite(h).all():
        raise NumericError("numeric overflow")
    tape = Tape(id(net), net.version, batched, inputs, pre)
    return (h if batched else h[0]), tape


def backward(net: DenseNet, tape: Tape, out_grad: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Reverse pass. Returns ([dW0, db0, dW1, db1, ...], d_input)."""
    if tape.net_id != id(net) or tape.version != net.version or len(tape.pre) != len(net.layers):
        raise ValueError("tape does not belong to the current state of this network")
    g = np.asarray(out_grad, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if g.shape != tape.pre[-1].shape:
        raise ValueError(f"out_grad shape {g.shape} does not match output {tape.pre[-1].shape}")
    grads: List[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == RELU:
            g = g * (tape.pre[i] > 0.0)
        grads[2 * i] = g.T @ tape.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, (g if tape.batched else g[0])


# --- Gaussian primitives -------------------------------------------------------------

@dataclass
class GaussianParams:
    mean: np.ndarray
    log_var: np.ndarray

    @classmethod
    def standard(cls, dim: int) -> "GaussianParams":
        return cls(np.zeros(dim), np.zeros(dim))


def gaussian_head(raw: np.ndarray, dim: int) -> GaussianParams:
    """Split a network output of width 2*dim into a Gaussian; log-variance is clamped."""
    if raw.shape[-1] != 2 * dim:
        raise ValueError(f"head output width {raw.shape[-1]} != 2*{dim}")
    return GaussianParams(raw[..., :dim], np.clip(raw[..., dim:], LOG_VAR_MIN, LOG_VAR_MAX))


def gaussian_head_backward(raw: np.ndarray, d_mean: np.ndarray, d_log_var: np.ndarray) -> np.ndarray:
    dim = d_mean.shape[-1]
    inside = (raw[..., dim:] >= LOG_VAR_MIN) & (raw[..., dim:] <= LOG_VAR_MAX)
    return np.concatenate([d_mean, d_log_var * inside], axis=-1)


def sample_reparam(g: GaussianParams, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != np.shape(g.mean):
        raise ValueError(f"noise shape {noise.shape} != mean shape {np.shape(g.mean)}")
    return g.mean + np.exp(0.5 * g.log_var) * noise


def reparam_backward(g: GaussianParams, noise: np.ndarray, d_sample: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. (mean, log_var) given its gradient w.r.t. the sample."""
    return d_sample, d_sample * noise * 0.5 * np.exp(0.5 * g.log_var)


def gaussian_log_pdf(x: np.ndarray, g: GaussianParams) -> np.ndarray:
    """Diagonal Gaussian log-density, summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != np.shape(g.mean)[-1:]:
        raise ValueError(f"x shape {x.shape} incompatible with mean shape {np.shape(g.mean)}")
    d = x - g.mean
    return np.sum(-0.5 * LOG_2PI - 0.5 * g.log_var - 0.5 * d * d * np.exp(-g.log_var), axis=-1)


def gaussian_log_pdf_grads(x: np.ndarray, g: GaussianParams):
    """Partial derivatives of gaussian_log_pdf w.r.t. x, mean and log_var."""
    inv_var = np.exp(-g.log_var)
    d = x - g.mean
    dx = -d * inv_var
    return dx, -dx, -0.5 + 0.5 * d * d * inv_var


def kl_to_standard_normal(g: GaussianParams) -> np.ndarray:
    """KL(N(mean, exp(log_var)) || N(0, I)), summed over the last axis."""
    return 0.5 * np.sum(np.exp(g.log_var) + g.mean ** 2 - 1.0 - g.log_var, axis=-1)


def kl_to_standard_normal_grads(g: GaussianParams) -> Tuple[np.ndarray, np.ndarray]:
    return g.mean, 0.5 * (np.exp(g.log_var) - 1.0)


# --- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam descent step; parameter arrays are updated in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- checkpoint container ------------------------------------------------------------

def _block(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unblock(b: dict) -> np.ndarray:
    return np.array(b["data"], dtype=np.float64).reshape(b["shape"])


def dumps_container(blocks: Dict[str, np.ndarray], meta: Optional[dict] = None,
                    adam: Optional[AdamState] = None) -> str:
    """Serialize named float64 blocks to JSON.

    Python's float repr round-trips exactly, so load(save(x)) is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "blocks": {k: _block(v) for k, v in blocks.items()},
    }
    if adam is not None:
        doc["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "step": adam.step,
            "m": {k: _block(v) for k, v in adam.m.items()},
            "v": {k: _block(v) for k, v in adam.v.items()},
        }
    return json.dumps(doc, sort_keys=True, allow_nan=False)


def loads_container(text: str) -> Tuple[Dict[str, np.ndarray], dict, Optional[AdamState]]:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a genids checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    blocks = {k: _unblock(v) for k, v in doc["blocks"].items()}
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                         {k: _unblock(v) for k, v in a["m"].items()},
                         {k: _unblock(v) for k, v in a["v"].items()})
    return blocks, doc["meta"], adam


def save_container(path, blocks, meta=None, adam=None) -> None:
    Path(path).write_text(dumps_container(blocks, meta, adam))


def load_container(path):
    return loads_container(Path(path).read_text())
