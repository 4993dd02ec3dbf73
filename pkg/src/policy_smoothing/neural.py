"""A small fully-connected network with exact reverse-mode gradients.

Layers are ``h = relu(h @ W + b)`` on hidden layers and a linear (or
tanh-scaled, for bounded continuous actions) output layer. ``W`` is stored as
``(fan_in, fan_out)`` so batched inputs multiply from the left. Gradients are
available with respect to both parameters and inputs; input gradients drive the
observation attacks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, DimMismatch, NonFiniteGradient

FORMAT_NAME = "policy_smoothing.mlp"
FORMAT_VERSION = 1


@dataclass
class GradBundle:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray

    def params(self) -> list[np.ndarray]:
        return [g for pair in zip(self.d_weights, self.d_biases) for g in pair]


class MlpNet:
    def __init__(self, layer_dims, weights=None, biases=None, output="linear",
                 action_low=-1.0, action_high=1.0, seed=0):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise BadConfig(f"bad layer dims {layer_dims}")
        if output not in ("linear", "tanh"):
            raise BadConfig(f"unknown output head {output!r}")
        self.output = output
        self.action_low = float(action_low)
        self.action_high = float(action_high)
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
                limit = np.sqrt(6.0 / fan_in)
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise DimMismatch(f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with {self.layer_dims}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpNet":
        return MlpNet(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                      self.output, self.action_low, self.action_high)

    def load_from(self, other: "MlpNet") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim or x.ndim not in (1, 2):
            raise DimMismatch(f"expected input of size {self.in_dim}, got shape {x.shape}")
        return x

    def _trace(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def _head(self, z):
        if self.output == "tanh":
            half = 0.5 * (self.action_high - self.action_low)
            return self.action_low + half + half * np.tanh(z)
        return z

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        return self._head(self._trace(x)[-1])

    def _backprop(self, acts, upstream):
        """Reverse pass given forward activations; returns a GradBundle."""
        g = np.asarray(upstream, dtype=np.float64)
        z_out = acts[-1]
        if g.shape != z_out.shape:
            raise DimMismatch(f"upstream shape {g.shape} != output shape {z_out.shape}")
        if self.output == "tanh":
            g = g * 0.5 * (self.action_high - self.action_low) * (1.0 - np.tanh(z_out) ** 2)
        n_layers = len(self.weights)
        d_w = [None] * n_layers
        d_b = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            a_in = acts[i]
            if a_in.ndim == 1:
                d_w[i] = np.outer(a_in, g)
                d_b[i] = g.copy()
            else:
                d_w[i] = a_in.T @ g
                d_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0)
        return GradBundle(d_w, d_b, g)

    def backward(self, x, upstream) -> GradBundle:
        """Gradients of ``<upstream, forward(x)>``.

        For a batch ``x`` of shape ``(n, in_dim)`` the parameter gradients are
        summed over rows and ``d_input`` is per row.
        """
        x = self._check_input(x)
        return self._backprop(self._trace(x), upstream)

    def forward_backward(self, x, loss_grad_fn):
        """One forward pass, then backprop of ``loss_grad_fn(output)``.

        ``loss_grad_fn`` maps the network output to ``(loss, d_output)``.
        """
        x = self._check_input(x)
        acts = self._trace(x)
        loss, d_out = loss_grad_fn(self._head(acts[-1]))
        return loss, self._backprop(acts, d_out)

    def input_grad(self, x, upstream) -> np.ndarray:
        return self.backward(x, upstream).d_input

    # persistence -----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "layer_dims": self.layer_dims,
            "output": self.output,
            "action_low": self.action_low,
            "action_high": self.action_high,
            "weight_layout": "row-major (fan_in, fan_out)",
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpNet":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise BadConfig(f"unsupported network format {d.get('format')!r} v{d.get('version')}")
        return cls(d["layer_dims"], d["weights"], d["biases"], d["output"], d["action_low"], d["action_high"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpNet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        if not isinstance(other, MlpNet):
            return NotImplemented
        return (self.layer_dims == other.layer_dims and self.output == other.output
                and self.action_low == other.action_low and self.action_high == other.action_high
                and all(np.array_equal(a, b) for a, b in zip(self.params(), other.params())))


def forward(net: MlpNet, x) -> np.ndarray:
    return net.forward(x)


def backward(net: MlpNet, x, upstream) -> GradBundle:
    return net.backward(x, upstream)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(net: MlpNet, grads, lr: float, state: AdamState) -> MlpNet:
    """Apply one Adam step in place and return ``net``.

    ``grads`` is a GradBundle or a flat list of arrays matching ``net.params()``.
    """
    gs = grads.params() if isinstance(grads, GradBundle) else list(grads)
    params = net.params()
    if len(gs) != len(params):
        raise DimMismatch("gradient list does not match the network parameters")
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient passed to adam_update")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net
