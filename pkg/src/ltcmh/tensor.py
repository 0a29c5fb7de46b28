"""Dense feed-forward network engine with manual backpropagation.

Matrices are plain float64 numpy arrays. Batches are samples x features;
layer weights are (output_dim x input_dim) so a layer computes
``x @ W.T + b``. Gradients are computed exactly by hand-written backward
passes, and :func:`finite_diff_grad` provides an independent
central-difference oracle for checking them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import FormatError, ShapeError, TrainingError

MODEL_MAGIC = b"LCMH"
NET_FORMAT_VERSION = 1

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + e^x) computed as max(x, 0) + log1p(e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _activate(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name, z, a):
    """d(activation)/d(pre-activation), given pre-act z and post-act a."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ForwardCache:
    """Per-layer intermediates from one forward pass."""

    inputs: np.ndarray
    pre_acts: list = field(default_factory=list)
    post_acts: list = field(default_factory=list)


class FeedForwardNet:
    """A stack of dense layers with per-layer activations."""

    def __init__(self, specs: Sequence[LayerSpec], rng: np.random.Generator):
        specs = list(specs)
        for a, b in zip(specs, specs[1:]):
            if a.output_dim != b.input_dim:
                raise ShapeError(
                    f"layer chain broken: output_dim {a.output_dim} "
                    f"!= next input_dim {b.input_dim}"
                )
        self.specs = specs
        self.weights = []
        self.biases = []
        for s in specs:
            limit = np.sqrt(6.0 / (s.input_dim + s.output_dim))
            self.weights.append(
                rng.uniform(-limit, limit, size=(s.output_dim, s.input_dim))
            )
            self.biases.append(np.zeros(s.output_dim))

    @property
    def input_dim(self):
        return self.specs[0].input_dim

    @property
    def output_dim(self):
        return self.specs[-1].output_dim

    def forward(self, batch: np.ndarray):
        """Run the net on a (samples x input_dim) batch.

        Returns (output, cache); the cache holds everything backward needs.
        """
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(
                f"batch shape {batch.shape} does not match net input "
                f"(*, {self.input_dim})"
            )
        cache = ForwardCache(inputs=batch)
        a = batch
        for spec, w, b in zip(self.specs, self.weights, self.biases):
            z = a @ w.T + b
            a = _activate(spec.activation, z)
            cache.pre_acts.append(z)
            cache.post_acts.append(a)
        return a, cache

    def backward(self, cache: ForwardCache, output_grad: np.ndarray):
        """Backpropagate d(loss)/d(output) through the cached pass.

        Returns (param_grads, input_grad) where param_grads is a list of
        (dW, db) pairs, one per layer.
        """
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != cache.post_acts[-1].shape:
            raise ShapeError(
                f"output_grad shape {output_grad.shape} != forward output "
                f"shape {cache.post_acts[-1].shape}"
            )
        param_grads = [None] * len(self.specs)
        g = output_grad
        for k in range(len(self.specs) - 1, -1, -1):
            spec = self.specs[k]
            z = cache.pre_acts[k]
            a = cache.post_acts[k]
            gz = g * _activate_grad(spec.activation, z, a)
            prev = cache.inputs if k == 0 else cache.post_acts[k - 1]
            dw = gz.T @ prev
            db = gz.sum(axis=0)
            param_grads[k] = (dw, db)
            g = gz @ self.weights[k]
        return param_grads, g

    def parameters(self):
        """Flat list of parameter arrays in declaration order (W, b per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self):
        clone = object.__new__(FeedForwardNet)
        clone.specs = list(self.specs)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


def sgd_step(net: FeedForwardNet, param_grads, learning_rate, momentum=0.0,
             velocity=None):
    """In-place SGD update; returns the velocity state (for momentum > 0)."""
    for dw, db in param_grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingError("non-finite gradient, aborting step")
    if momentum == 0.0:
        for k, (dw, db) in enumerate(param_grads):
            net.weights[k] -= learning_rate * dw
            net.biases[k] -= learning_rate * db
        return None
    if velocity is None:
        velocity = [(np.zeros_like(dw), np.zeros_like(db))
                    for dw, db in param_grads]
    for k, (dw, db) in enumerate(param_grads):
        vw, vb = velocity[k]
        vw *= momentum
        vw += dw
        vb *= momentum
        vb += db
        net.weights[k] -= learning_rate * vw
        net.biases[k] -= learning_rate * vb
    return velocity


def finite_diff_grad(loss_fn: Callable[[FeedForwardNet], float],
                     net: FeedForwardNet, eps: float):
    """Central-difference gradient of loss_fn over every net parameter.

    Independent oracle for the analytic backward pass; O(#params) loss
    evaluations, so only usable on small nets.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = []
    for k in range(len(net.specs)):
        pair = []
        for arr in (net.weights[k], net.biases[k]):
            g = np.zeros_like(arr)
            flat = arr.ravel()
            gflat = g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_fn(net)
                flat[i] = orig - eps
                lo = loss_fn(net)
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * eps)
            pair.append(g)
        grads.append((pair[0], pair[1]))
    return grads


# --- persistence ------------------------------------------------------------

def write_net(f: BinaryIO, net: FeedForwardNet):
    """Write layer specs and parameters (little-endian f64) to a stream."""
    f.write(struct.pack("<I", len(net.specs)))
    for s in net.specs:
        f.write(struct.pack("<IIB", s.input_dim, s.output_dim,
                            ACTIVATIONS.index(s.activation)))
    for w, b in zip(net.weights, net.biases):
        f.write(w.astype("<f8").tobytes())
        f.write(b.astype("<f8").tobytes())


def read_net(f: BinaryIO) -> FeedForwardNet:
    def take(n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated while reading {what} at offset {f.tell()}")
        return buf

    (n_layers,) = struct.unpack("<I", take(4, "layer count"))
    specs = []
    for _ in range(n_layers):
        din, dout, act = struct.unpack("<IIB", take(9, "layer spec"))
        if act >= len(ACTIVATIONS):
            raise FormatError(f"bad activation tag {act} at offset {f.tell()}")
        specs.append(LayerSpec(din, dout, ACTIVATIONS[act]))
    net = object.__new__(FeedForwardNet)
    net.specs = specs
    net.weights = []
    net.biases = []
    for s in specs:
        nw = s.output_dim * s.input_dim
        w = np.frombuffer(take(8 * nw, "weights"), dtype="<f8").reshape(
            s.output_dim, s.input_dim).copy()
        b = np.frombuffer(take(8 * s.output_dim, "biases"), dtype="<f8").copy()
        net.weights.append(w)
        net.biases.append(b)
    return net


def save_net(path, net: FeedForwardNet):
    """Standalone net file: magic LCMH, version, then the net section."""
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", NET_FORMAT_VERSION))
        write_net(f, net)


def load_net(path) -> FeedForwardNet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0")
        (version,) = struct.unpack("<I", f.read(4))
        if version != NET_FORMAT_VERSION:
            raise FormatError(f"unsupported net format version {version} at offset 4")
        return read_net(f)
