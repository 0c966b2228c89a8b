#!/usr/bin/env python3
"""
Dense Network Substrate

Small fully connected networks in float64 numpy with exact backpropagation,
the Adamax optimizer, global gradient-norm clipping and a binary weight
checkpoint format.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "mchh-dense-v1"


class DenseNet:
    """Affine layers with tanh between them; identity (or tanh) output"""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None,
                 output: str = "identity"):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ValueError(f"invalid layer sizes: {sizes}")
        if output not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation: {output}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache: Optional[List[np.ndarray]] = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in (W0, b0, W1, b1, ...) order; returned by reference"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zero_(self) -> "DenseNet":
        for p in self.parameters():
            p[...] = 0.0
        return self

    def copy(self) -> "DenseNet":
        clone = DenseNet.__new__(DenseNet)
        clone.sizes = self.sizes
        clone.output = self.output
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone._cache = None
        return clone

    def load_from(self, other: "DenseNet"):
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, vector: np.ndarray):
        offset = 0
        for p in self.parameters():
            p[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Accepts one input vector or a (batch, inputs) matrix; caches activations for backward"""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[1] != self.sizes[0]:
            raise ValueError(f"input has {a.shape[1]} features, network expects {self.sizes[0]}")
        activations = [a]
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            last = layer == self.n_layers - 1
            a = z if (last and self.output == "identity") else np.tanh(z)
            activations.append(a)
        self._cache = activations
        return a[0] if single else a

    def backward(self, upstream: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Gradients of sum(output * upstream) w.r.t. parameters and input, using the last forward"""
        if self._cache is None:
            raise RuntimeError("backward() called before forward()")
        activations = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        single = g.ndim == 1
        g = g[None, :] if single else g
        if g.shape != activations[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {activations[-1].shape}")
        grads_w: List[np.ndarray] = [None] * self.n_layers
        grads_b: List[np.ndarray] = [None] * self.n_layers
        for layer in reversed(range(self.n_layers)):
            out = activations[layer + 1]
            last = layer == self.n_layers - 1
            if not (last and self.output == "identity"):
                g = g * (1.0 - out ** 2)
            grads_w[layer] = activations[layer].T @ g
            grads_b[layer] = g.sum(axis=0)
            g = g @ self.weights[layer].T
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend((gw, gb))
        return grads, (g[0] if single else g)


@dataclass
class AdamaxState:
    m: List[np.ndarray]
    u: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999) -> "AdamaxState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, beta1, beta2)


def adamax_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamaxState, lr: float,
                floor: float = 1e-12):
    """In-place Adamax update of params (descent direction)"""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.t += 1
    scale = lr / (1.0 - state.beta1 ** state.t)
    for p, g, m, u in zip(params, grads, state.m, state.u):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p -= scale * m / np.maximum(u, floor)


class Adamax:
    """Optimizer bound to one parameter list"""

    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999):
        self.params = list(params)
        self.lr = lr
        self.state = AdamaxState.fresh(self.params, beta1, beta2)

    def step(self, grads: Sequence[np.ndarray]):
        adamax_step(self.params, grads, self.state, self.lr)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    """Rescale so the global L2 norm is at most max_norm; returns (grads, norm before clipping)"""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm


# --- checkpoints ------------------------------------------------------------------
# Layout: little-endian uint64 header length, UTF-8 JSON header, then every
# array as contiguous little-endian float64 in header order.

def save_parameters(path, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({'name': name, 'shape': list(arr.shape), 'offset': offset})
        offset += int(arr.size)
    header = json.dumps({'format': CHECKPOINT_MAGIC, 'arrays': entries, 'meta': meta or {}}).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    logger.info(f"Saved {len(entries)} array(s) to {path}")
    return path


def load_parameters(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, 'rb') as f:
        (length,) = struct.unpack('<Q', f.read(8))
        header = json.loads(f.read(length).decode('utf-8'))
        data = np.frombuffer(f.read(), dtype='<f8')
    if header.get('format') != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a dense network checkpoint")
    arrays = {}
    for entry in header['arrays']:
        size = int(np.prod(entry['shape'], dtype=np.int64))
        arrays[entry['name']] = data[entry['offset']:entry['offset'] + size].reshape(entry['shape']).astype(np.float64)
    return arrays, header.get('meta', {})


def net_arrays(prefix: str, net: DenseNet) -> Dict[str, np.ndarray]:
    out = {}
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.{layer}.weight"] = w
        out[f"{prefix}.{layer}.bias"] = b
    return out


def load_net_arrays(prefix: str, net: DenseNet, arrays: Dict[str, np.ndarray]):
    for layer in range(net.n_layers):
        w = arrays[f"{prefix}.{layer}.weight"]
        b = arrays[f"{prefix}.{layer}.bias"]
        if w.shape != net.weights[layer].shape or b.shape != net.biases[layer].shape:
            raise ValueError(f"checkpoint layer {prefix}.{layer} does not match the network shape")
        net.weights[layer][...] = w
        net.biases[layer][...] = b
