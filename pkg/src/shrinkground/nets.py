"""Small feed-forward networks with hand-written backprop, Adam and checkpoints.

All parameters of a network live in one flat float64 vector; per-layer
weights and biases are views into it. Optimizers and checkpoints operate on
the flat vector directly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

_ACTIVATIONS = ("tanh", "relu", "linear")
_HEADS = ("logits", "scalar", "linear")


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class Cache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool


class Mlp:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ``hidden`` (tanh by default); the last layer is affine.
    A ``scalar`` head requires ``sizes[-1] == 1`` and returns plain numbers.
    Inputs may be a single vector or a batch of row vectors.
    """

    def __init__(self, sizes: Sequence[int], hidden: str = "tanh", head: str = "logits",
                 seed: int = 0, params: np.ndarray | None = None):
        if len(sizes) < 2:
            raise ShapeError("an Mlp needs at least an input and an output size")
        if hidden not in _ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {hidden!r}")
        if head not in _HEADS:
            raise ValueError(f"unknown head {head!r}")
        if head == "scalar" and sizes[-1] != 1:
            raise ShapeError("scalar head needs output size 1")
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden = hidden
        self.head = head
        self.seed = seed
        self.shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        n = sum(a * b + b for a, b in self.shapes)
        if params is None:
            rng = np.random.default_rng(seed)
            chunks = []
            for a, b in self.shapes:
                bound = 1.0 / np.sqrt(a)
                chunks.append(rng.uniform(-bound, bound, size=a * b))
                chunks.append(rng.uniform(-bound, bound, size=b))
            params = np.concatenate(chunks)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self._bind()

    def _bind(self) -> None:
        self.weights, self.biases, self.names = [], [], []
        off = 0
        for i, (a, b) in enumerate(self.shapes):
            self.weights.append(self.params[off:off + a * b].reshape(a, b))
            self.names.append((f"layers.{i}.weight", off, off + a * b))
            off += a * b
            self.biases.append(self.params[off:off + b])
            self.names.append((f"layers.{i}.bias", off, off + b))
            off += b

    @property
    def n_params(self) -> int:
        return self.params.size

    def param_path(self, flat_index: int) -> str:
        for name, lo, hi in self.names:
            if lo <= flat_index < hi:
                return name
        raise IndexError(flat_index)

    def clone(self) -> "Mlp":
        return Mlp(self.sizes, self.hidden, self.head, self.seed, self.params.copy())

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.hidden == "tanh":
            return np.tanh(z)
        if self.hidden == "relu":
            return np.maximum(z, 0.0)
        return z

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise ShapeError(f"input shape {x.shape} incompatible with input size {self.sizes[0]}")
        inputs, outputs = [], []
        last = len(self.shapes) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W + b
            h = z if i == last else self._act(z)
            outputs.append(h)
        y = h
        if self.head == "scalar":
            y = y[:, 0]
        if squeeze:
            y = y[0]
        return y, Cache(inputs, outputs, squeeze)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(self, cache: Cache, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. the flat parameters and the input."""
        g = np.asarray(upstream, dtype=np.float64)
        if self.head == "scalar":
            g = g.reshape(-1, 1) if not cache.squeeze else g.reshape(1, 1)
        elif cache.squeeze:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output")
        grad = np.empty_like(self.params)
        last = len(self.shapes) - 1
        off_end = grad.size
        for i in range(last, -1, -1):
            a, b = self.shapes[i]
            if i != last:
                out = cache.outputs[i]
                if self.hidden == "tanh":
                    g = g * (1.0 - out * out)
                elif self.hidden == "relu":
                    g = g * (out > 0.0)
            grad[off_end - b:off_end] = g.sum(axis=0)
            grad[off_end - b - a * b:off_end - b] = (cache.inputs[i].T @ g).reshape(-1)
            off_end -= a * b + b
            g = g @ self.weights[i].T
        dx = g[0] if cache.squeeze else g
        return grad, dx

    def header(self) -> dict:
        return {"kind": "mlp", "sizes": list(self.sizes), "hidden": self.hidden,
                "head": self.head, "seed": self.seed}


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    _buf: np.ndarray | None = field(default=None, repr=False, compare=False)

    def step(self, params: np.ndarray, grads: np.ndarray, net: Mlp | None = None,
             ascend: bool = False) -> np.ndarray:
        """Update ``params`` in place against ``grads`` (along them if ``ascend``)."""
        if grads.shape != params.shape:
            raise ShapeError(f"gradient shape {grads.shape} != parameter shape {params.shape}")
        if not np.isfinite(grads @ grads):
            bad = ~np.isfinite(grads)
            if bad.any():
                i = int(np.argmax(bad))
                where = net.param_path(i) if net is not None else f"index {i}"
                raise NonFiniteGradient(f"non-finite gradient in {where}")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self._buf is None or self._buf.shape != params.shape:
            self._buf = np.empty_like(params)
        buf = self._buf
        self.t += 1
        self.m *= self.beta1
        np.multiply(grads, (self.beta1 - 1.0) if ascend else (1.0 - self.beta1), out=buf)
        self.m += buf
        self.v *= self.beta2
        np.multiply(grads, grads, out=buf)
        buf *= 1.0 - self.beta2
        self.v += buf
        # p -= lr/(1-b1^t) * m / (sqrt(v/(1-b2^t)) + eps)
        np.multiply(self.v, 1.0 / (1.0 - self.beta2 ** self.t), out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= self.lr / (1.0 - self.beta1 ** self.t)
        params -= buf
        return params

    def copy(self) -> "Adam":
        return Adam(self.lr, self.beta1, self.beta2, self.eps, self.t,
                    None if self.m is None else self.m.copy(),
                    None if self.v is None else self.v.copy())


# Checkpoint layout: magic, uint32 header length, UTF-8 JSON header, then the
# little-endian float64 parameter array.
_MAGIC = b"SGCK"


def write_checkpoint(path: str | Path, header: dict, flat: np.ndarray) -> None:
    head = json.dumps({**header, "n_params": int(flat.size)}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(np.asarray(flat, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    flat = np.frombuffer(data[8 + n:], dtype="<f8").astype(np.float64)
    if flat.size != header["n_params"]:
        raise ValueError(f"{path}: truncated parameter array")
    return header, flat


def save_mlp(path: str | Path, net: Mlp, **extra) -> None:
    write_checkpoint(path, {**net.header(), **extra}, net.params)


def load_mlp(path: str | Path) -> tuple[Mlp, dict]:
    header, flat = read_checkpoint(path)
    if header.get("kind") != "mlp":
        raise ValueError(f"{path} does not hold an Mlp")
    net = Mlp(header["sizes"], header["hidden"], header["head"], header["seed"], flat)
    return net, header


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``; ``x`` is restored afterwards."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)
