"""Small dense tanh network with hand-written reverse mode and an Adam optimiser.

All parameters of a network live in one flat vector ``theta``; the weight
matrices and bias vectors are views into it, so optimisers only ever see a
single array.  Layout: for each layer, ``W`` (out x in, row-major) then ``b``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch

log = logging.getLogger(__name__)

FORMAT = "swimrl.densenet/1"


def n_params(sizes) -> int:
    return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))


class DenseNet:
    """Feed-forward net: tanh hidden layers, linear output."""

    def __init__(self, sizes, theta: np.ndarray | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        n = n_params(self.sizes)
        if theta is None:
            theta = np.zeros(n)
        if theta.shape != (n,):
            raise ShapeMismatch(f"theta has shape {theta.shape}, architecture needs ({n},)")
        self.theta = theta
        self.weights, self.biases = [], []
        k = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(theta[k:k + o * i].reshape(o, i))
            k += o * i
            self.biases.append(theta[k:k + o])
            k += o

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, zero_last: bool = True,
             theta: np.ndarray | None = None) -> "DenseNet":
        """Glorot-uniform weights, zero biases; the last layer is zeroed if asked."""
        net = cls(sizes, theta)
        for li, W in enumerate(net.weights):
            fan_out, fan_in = W.shape
            if zero_last and li == len(net.weights) - 1:
                W[...] = 0.0
            else:
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                W[...] = rng.uniform(-lim, lim, size=W.shape)
        for b in net.biases:
            b[...] = 0.0
        return net

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.theta.copy())

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "sizes": list(self.sizes),
            "activation": "tanh",
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNet":
        if doc.get("format") != FORMAT:
            raise ValueError(f"unsupported network format {doc.get('format')!r}")
        net = cls(doc["sizes"])
        if len(doc["layers"]) != len(net.weights):
            raise ShapeMismatch("layer count does not match sizes")
        for layer, W, b in zip(doc["layers"], net.weights, net.biases):
            W[...] = np.asarray(layer["W"], dtype=float)
            b[...] = np.asarray(layer["b"], dtype=float)
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DenseNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_input(net: DenseNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_in:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, network expects {net.n_in}")
    return x


def forward_cache(net: DenseNet, x):
    """Forward pass keeping layer activations; ``x`` is (n_in,) or (batch, n_in)."""
    x = _check_input(net, x)
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for li, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        h = z if li == last else np.tanh(z)
        acts.append(h)
    return h, acts


def forward(net: DenseNet, x) -> np.ndarray:
    return forward_cache(net, x)[0]


def backward(net: DenseNet, acts, adjoint) -> np.ndarray:
    """Gradient of ``sum(adjoint * output)`` from cached activations, summed over the batch."""
    grad = np.zeros_like(net.theta)
    g_net = DenseNet(net.sizes, grad)
    delta = np.asarray(adjoint, dtype=float)
    if delta.shape != acts[-1].shape:
        raise ShapeMismatch(f"adjoint shape {delta.shape} != output shape {acts[-1].shape}")
    for li in range(len(net.weights) - 1, -1, -1):
        h_in = acts[li]
        if delta.ndim == 1:
            g_net.weights[li][...] = np.outer(delta, h_in)
            g_net.biases[li][...] = delta
        else:
            g_net.weights[li][...] = delta.T @ h_in
            g_net.biases[li][...] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ net.weights[li]) * (1.0 - h_in * h_in)
    return grad


def gradient(net: DenseNet, adjoint, x) -> np.ndarray:
    """Reverse-mode gradient of ``sum(adjoint * forward(net, x))`` w.r.t. ``net.theta``."""
    _, acts = forward_cache(net, x)
    return backward(net, acts, adjoint)


@dataclass
class OptimizerState:
    """Adam state, or the ``alpha / t`` schedule when ``schedule == "inv_t"``."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "adam"
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    skipped: int = 0

    def __post_init__(self):
        if self.schedule not in ("adam", "inv_t"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def optimizer_step(state: OptimizerState, theta: np.ndarray, grad, ascent: bool = True) -> bool:
    """Update ``theta`` in place; returns False (and skips) on a non-finite gradient."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape:
        raise ShapeMismatch(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        log.warning("non-finite gradient; update skipped (%d so far)", state.skipped)
        return False
    sign = 1.0 if ascent else -1.0
    state.step += 1
    if state.schedule == "inv_t":
        theta += sign * state.lr / state.step * grad
        return True
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    theta += sign * state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True
