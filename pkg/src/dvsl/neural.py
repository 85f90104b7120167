"""Small dense networks with hand-written gradients.

Only what the controllers need: fully connected layers with relu, sigmoid or
identity activations, an optional constant scale on the output, batched
forward passes that keep a trace for backpropagation, Adam, soft target
updates and a checksummed binary weight format. Everything is float64.

Arrays are batch-major: inputs have shape ``(n, in_dim)`` and a layer computes
``act(x @ W.T + b)`` with ``W`` of shape ``(out, in)``.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, ProtocolError, ShapeError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "identity")
MAGIC = b"DVSLNET\x00"
FORMAT_VERSION = 1


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


class MLPParams:
    """Weights of one network plus the output scale.

    ``version`` increases whenever the weights are changed through this
    module, so a forward trace taken before an update cannot be
    backpropagated afterwards.
    """

    def __init__(self, layers: list[Layer], scale: float = 1.0):
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.b.shape != (layer.out_dim,):
                raise ShapeError(f"bias shape {layer.b.shape} does not match weight rows {layer.out_dim}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers
        self.scale = float(scale)
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...), as views."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "MLPParams":
        p = MLPParams([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers], self.scale)
        return p

    def touch(self) -> None:
        self.version += 1

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def equals(self, other: "MLPParams") -> bool:
        if self.dims != other.dims or self.scale != other.scale:
            return False
        if [l.activation for l in self.layers] != [l.activation for l in other.layers]:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_mlp(dims: list[int], activations: list[str], rng: np.random.Generator,
             scale: float = 1.0) -> MLPParams:
    """Uniform fan-in initialisation: entries drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(W, b, act))
    return MLPParams(layers, scale)


def actor_network(rng, state_dim=11, hidden=120, n_lanes=5, m=6) -> MLPParams:
    return init_mlp([state_dim, hidden, n_lanes], ["relu", "sigmoid"], rng, scale=m)


def critic_network(rng, state_dim=11, action_dim=5, hidden=120) -> MLPParams:
    return init_mlp([state_dim + action_dim, hidden, 1], ["relu", "identity"], rng)


def dqn_network(rng, state_dim=11, hidden=120, m=6) -> MLPParams:
    return init_mlp([state_dim, hidden, m], ["relu", "identity"], rng)


def zeros_like(params: MLPParams) -> MLPParams:
    return MLPParams([Layer(np.zeros_like(l.W), np.zeros_like(l.b), l.activation) for l in params.layers],
                     params.scale)


# ---------------------------------------------------------------------- forward / backward
def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        # split by sign to stay finite for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(z)


@dataclass
class Trace:
    """Intermediate values of one batched forward pass."""

    params: MLPParams
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)      # pre-activation of each layer
    post: list[np.ndarray] = field(default_factory=list)     # activation of each layer (unscaled)
    output: np.ndarray | None = None


@dataclass
class Gradients:
    dW: list[np.ndarray]
    db: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.dW, self.db):
            out += [w, b]
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise ShapeError(f"expected input dim {dim}, got shape {x.shape}")
    return x2, single


def forward(params: MLPParams, x) -> tuple[np.ndarray, Trace]:
    """Batched forward pass; returns outputs of shape ``(n, out_dim)`` and the trace."""
    h, _ = _as_batch(x, params.in_dim)
    tr = Trace(params, params.version)
    for layer in params.layers:
        tr.inputs.append(h)
        z = h @ layer.W.T + layer.b
        h = _act(layer.activation, z)
        tr.pre.append(z)
        tr.post.append(h)
    tr.output = params.scale * h
    return tr.output, tr


def predict(params: MLPParams, x) -> np.ndarray:
    """Forward pass without keeping a trace; a 1-D input gives a 1-D output."""
    x2, single = _as_batch(x, params.in_dim)
    out, _ = forward(params, x2)
    return out[0] if single else out


def backward(params: MLPParams, trace: Trace, grad_out) -> tuple[Gradients, np.ndarray]:
    """Backpropagate ``dL/d(output)`` through a traced pass.

    Returns parameter gradients (summed over the batch) and ``dL/d(input)``
    per sample.
    """
    if trace.params is not params or trace.version != params.version:
        raise ProtocolError("forward trace is stale: parameters changed since the forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {trace.output.shape}")
    g = g * params.scale
    dW: list[np.ndarray] = [None] * len(params.layers)
    db: list[np.ndarray] = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        g = g * _act_grad(layer.activation, trace.pre[k], trace.post[k])
        dW[k] = g.T @ trace.inputs[k]
        db[k] = g.sum(axis=0)
        g = g @ layer.W
    return Gradients(dW, db), g


def actor_forward(params: MLPParams, s) -> np.ndarray:
    """Continuous actor output ``m * sigmoid(...)``, one row per state."""
    return predict(params, s)


def critic_forward(params: MLPParams, s, a) -> np.ndarray:
    """Q(s, a) for batches of states and actions (or a single pair)."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.ndim != a.ndim:
        raise ShapeError(f"state and action batch ranks differ: {s.shape} vs {a.shape}")
    x = np.concatenate([s, a], axis=-1)
    out = predict(params, x)
    return out[..., 0]


def critic_action_gradient(params: MLPParams, s, a, state_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Q values and dQ/da for each row of a batch."""
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
    q, tr = forward(params, x)
    _, gx = backward(params, tr, np.ones_like(q))
    return q[:, 0], gx[:, state_dim:]


# ---------------------------------------------------------------------- optimisation
class Adam:
    """Adam with bias correction. ``step`` returns False (and logs) when it refuses a gradient."""

    def __init__(self, params: MLPParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0
        self.skipped = 0

    def step(self, params: MLPParams, grads: Gradients) -> bool:
        garr = grads.arrays()
        parr = params.arrays()
        if len(garr) != len(parr) or any(g.shape != p.shape for g, p in zip(garr, parr)):
            raise ShapeError("gradient shapes do not match parameters")
        if not grads.all_finite():
            self.skipped += 1
            log.warning("non-finite gradient: optimiser step skipped (%d so far)", self.skipped)
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(parr, garr, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.touch()
        return True


def optimizer_step(params: MLPParams, grads: Gradients, opt: Adam) -> bool:
    return opt.step(params, grads)


def soft_update(target: MLPParams, online: MLPParams, tau: float) -> MLPParams:
    """Blend ``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if target.dims != online.dims:
        raise ShapeError(f"target dims {target.dims} != online dims {online.dims}")
    for t, o in zip(target.arrays(), online.arrays()):
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
    target.touch()
    return target


# ---------------------------------------------------------------------- persistence
# Layout, all little-endian: magic[8], u16 format version, u16 layer count,
# f64 output scale, per layer (u32 in, u32 out, u8 activation), then every
# layer's W (row-major) and b as f64, then a u32 CRC32 of all preceding bytes.

_HEAD = struct.Struct("<8sHHd")
_LAYER = struct.Struct("<IIB")
_CRC = struct.Struct("<I")


def weights_to_bytes(params: MLPParams) -> bytes:
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(params.layers), params.scale)]
    for layer in params.layers:
        parts.append(_LAYER.pack(layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation)))
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def weights_from_bytes(data: bytes, expected_dims: list[int] | None = None) -> MLPParams:
    if len(data) < _HEAD.size + _CRC.size:
        raise CorruptFileError(f"weight file too short ({len(data)} bytes)")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    magic, version, n_layers, scale = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise CorruptFileError("not a weight file (bad magic)")
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported weight format version {version}")
    off = _HEAD.size
    if len(body) < off + n_layers * _LAYER.size:
        raise CorruptFileError("weight file truncated in layer table")
    specs = []
    for _ in range(n_layers):
        specs.append(_LAYER.unpack_from(body, off))
        off += _LAYER.size
    payload = sum(o * i + o for i, o, _ in specs) * 8
    if len(body) != off + payload:
        raise CorruptFileError(f"weight payload has {len(body) - off} bytes, expected {payload}")
    if zlib.crc32(body) != crc:
        raise CorruptFileError("weight file checksum mismatch")
    dims = [specs[0][0]] + [o for _, o, _ in specs] if specs else []
    if expected_dims is not None and list(expected_dims) != dims:
        raise ShapeError(f"weight file dims {dims} do not match expected {list(expected_dims)}")
    layers = []
    for i, o, act in specs:
        if act >= len(ACTIVATIONS):
            raise CorruptFileError(f"unknown activation tag {act}")
        W = np.frombuffer(body, dtype="<f8", count=o * i, offset=off).reshape(o, i).astype(np.float64)
        off += o * i * 8
        b = np.frombuffer(body, dtype="<f8", count=o, offset=off).astype(np.float64)
        off += o * 8
        layers.append(Layer(W, b, ACTIVATIONS[act]))
    return MLPParams(layers, scale)


def save_weights(params: MLPParams, path) -> Path:
    path = Path(path)
    path.write_bytes(weights_to_bytes(params))
    return path


def load_weights(path, expected_dims: list[int] | None = None) -> MLPParams:
    return weights_from_bytes(Path(path).read_bytes(), expected_dims)
