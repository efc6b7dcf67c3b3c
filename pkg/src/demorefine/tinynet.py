"""A small tanh MLP with hand-written backprop, Adam, and a binary checkpoint."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DMDF"
FORMAT_VERSION = 1


class NetError(ValueError):
    pass


@dataclass
class Mlp:
    """Weights are stored ``(fan_out, fan_in)``; the last layer is linear."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, widths, seed: int) -> "Mlp":
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise NetError(f"invalid layer widths {widths}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(widths, weights, biases)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.widths), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    net_id: int
    inputs: list[np.ndarray]  # input to every layer
    acts: list[np.ndarray]  # tanh outputs of hidden layers
    squeeze: bool


def mlp_forward(net: Mlp, x):
    """Evaluate on a vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise NetError(f"expected input width {net.widths[0]}, got shape {x.shape}")
    inputs, acts = [], []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if i < last:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    y = h[0] if squeeze else h
    return y, ForwardCache(id(net), inputs, acts, squeeze)


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x: np.ndarray

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def mlp_backward(net: Mlp, cache: ForwardCache, dl_dy) -> Grads:
    """Reverse-mode gradients; batch gradients are summed over rows."""
    if cache.net_id != id(net) or len(cache.inputs) != len(net.weights):
        raise NetError("forward cache does not belong to this network")
    g = np.asarray(dl_dy, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], net.widths[-1]):
        raise NetError(f"output gradient shape {g.shape} does not match forward pass")
    n_layers = len(net.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (1.0 - cache.acts[i] ** 2)
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    gx = g[0] if cache.squeeze else g
    return Grads(gw, gb, gx)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, **hyper) -> "AdamState":
        params = net.params()
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(net: Mlp, grads: Grads, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, applied in place to ``net`` and ``state``."""
    params = net.params()
    gs = grads.params()
    if len(gs) != len(params) or len(state.m) != len(params):
        raise NetError("gradient / optimizer state does not match network")
    step_lr = state.lr if lr is None else lr
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        if g.shape != p.shape:
            raise NetError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)


def timestep_embedding(s, dim: int, num_steps: int, max_period: float = 10000.0):
    """Sinusoidal features ``[sin(s w_k), cos(s w_k)]``, w_k geometric in k.

    Accepts a scalar step or an integer array of steps (returns ``(n, dim)``).
    """
    if dim <= 0 or dim % 2:
        raise NetError(f"embedding dim must be a positive even integer, got {dim}")
    s_arr = np.asarray(s)
    if np.any(s_arr < 0) or np.any(s_arr > num_steps):
        raise NetError(f"step outside [0, {num_steps}]")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.multiply.outer(s_arr.astype(np.float64), freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def save_checkpoint(net: Mlp, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(net.widths))
    out += struct.pack(f"<{len(net.widths)}I", *net.widths)
    for w, b in zip(net.weights, net.biases):
        out += np.ascontiguousarray(w, dtype="<f8").tobytes()
        out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Mlp:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise NetError(f"{path}: not a network checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {version}")
    widths = list(struct.unpack_from(f"<{n}I", raw, 12))
    off = 12 + 4 * n
    expected = off + 8 * sum(o * (i + 1) for i, o in zip(widths[:-1], widths[1:]))
    if expected != len(raw):
        raise NetError(f"{path}: expected {expected} bytes, found {len(raw)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    return Mlp(widths, weights, biases)
