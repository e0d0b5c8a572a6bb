"""A small dense-network engine in numpy.

Just enough for SIREN stacks: forward/backward passes with input gradients,
Adam, two learning-rate schedules and the losses used in training.
Weights are float32; losses and bias-gradient reductions accumulate in
float64. Any float dtype works for the passes, which is how the gradient
checks run on float64 shadow copies.

Checkpoint format ``RAYW`` (little-endian)::

    magic "RAYW" | u32 version | u32 layer count
    | per layer: u32 in, u32 out, u8 activation tag, f32 omega
    | per layer: f32 weights (in x out, row-major), f32 biases
    | u8 has_adam [| u64 step | f64 beta1, beta2, eps
                   | per layer: f32 m_W, m_b, v_W, v_b]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, NonFiniteGradient, OutOfRange, ShapeMismatch
from .binio import read_header, take

WEIGHTS_MAGIC = b"RAYW"
WEIGHTS_VERSION = 1
ACTIVATION_TAGS = {"linear": 0, "sine": 1, "sigmoid": 2}
TAG_NAMES = {v: k for k, v in ACTIVATION_TAGS.items()}


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray
    activation: str = "sine"
    omega: float = 30.0

    def __post_init__(self):
        if self.activation not in ACTIVATION_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "sine" and not self.omega > 0:
            raise ValueError("sine frequency must be positive")


@dataclass
class MlpParams:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeMismatch("consecutive layer dimensions do not chain")

    @property
    def sizes(self):
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation, l.omega)
                          for l in self.layers])

    def copy(self) -> "MlpParams":
        return self.astype(self.layers[0].weight.dtype)

    def arrays(self):
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


ROW_BLOCK = 16


def _rowwise(a, b):
    """``a @ b`` where each output row depends only on its input row.

    BLAS routes leftover rows through a different kernel with a different
    summation order, so identical rows can differ in the last bits. Padding
    the batch to whole blocks keeps every row on the same path.
    """
    n = a.shape[0]
    pad = -n % ROW_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]), a.dtype)])
    return (a @ b)[:n]


def _activate(layer, z):
    if layer.activation == "sine":
        return np.sin(layer.omega * z)
    if layer.activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _check_input(params, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.layers[0].weight.shape[0]:
        raise ShapeMismatch(f"input of shape {x.shape} does not fit layer sizes {params.sizes}")
    return x.astype(params.layers[0].weight.dtype, copy=False)


def forward_cache(params: MlpParams, x):
    """Forward pass keeping the per-layer inputs and pre-activations."""
    h = _check_input(params, x)
    cache = []
    for layer in params.layers:
        z = _rowwise(h, layer.weight) + layer.bias
        out = _activate(layer, z)
        cache.append((h, z, out))
        h = out
    return h, cache


def forward(params: MlpParams, x):
    return forward_cache(params, x)[0]


def backward(params: MlpParams, x, upstream, cache=None, extra=None):
    """Reverse-mode gradients.

    ``upstream`` is dLoss/dOutput. ``extra`` optionally maps a layer index to
    an additional gradient on that layer's output (used to join a side
    branch into the trunk). Returns ``([(dW, db), ...], d_input)``.
    """
    if cache is None:
        _, cache = forward_cache(params, x)
    g = np.asarray(upstream)
    if g.shape != cache[-1][2].shape:
        raise ShapeMismatch(f"upstream gradient {g.shape} vs output {cache[-1][2].shape}")
    dtype = params.layers[0].weight.dtype
    g = g.astype(dtype, copy=False)
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        h, z, out = cache[i]
        if extra and i in extra:
            g = g + extra[i]
        if layer.activation == "sine":
            dz = g * (layer.omega * np.cos(layer.omega * z))
        elif layer.activation == "sigmoid":
            dz = g * (out * (1.0 - out))
        else:
            dz = g
        dW = h.T @ dz
        db = dz.sum(axis=0, dtype=np.float64).astype(dtype)
        grads[i] = (dW, db)
        g = _rowwise(dz, layer.weight.T)
    return grads, g


def input_gradient(params: MlpParams, x):
    """Output values and d(output)/d(input) for a scalar-output net, with a
    single forward evaluation per row."""
    out, cache = forward_cache(params, x)
    _, gx = backward(params, x, np.ones_like(out), cache=cache)
    return out, gx


# ---------------------------------------------------------------------------
# initialization


def init_siren(layer_sizes, omega0=30.0, rng_seed=0, final_activation="linear", dtype=np.float32):
    """SIREN initialization.

    First layer: U(-1/fan_in, 1/fan_in); later layers
    U(-sqrt(6/fan_in)/omega, +sqrt(6/fan_in)/omega). Biases share their
    layer's bound.
    """
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    rng = np.random.default_rng(rng_seed)
    layers = []
    n = len(layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes, layer_sizes[1:])):
        bound = 1.0 / fan_in if i == 0 else math.sqrt(6.0 / fan_in) / omega0
        W = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
        b = rng.uniform(-bound, bound, fan_out).astype(dtype)
        act = final_activation if i == n - 1 else "sine"
        layers.append(Layer(W, b, act, float(omega0) if act == "sine" else 1.0))
    return MlpParams(layers)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], **kw)


def flatten_grads(grads):
    out = []
    for dW, db in grads:
        out += [dW, db]
    return out


def adam_step(params, grads, state: AdamState, lr):
    """One in-place Adam update with bias correction.

    ``params`` is anything exposing ``arrays()`` in a fixed order; ``grads``
    is the list returned by :func:`backward` (or a flat list in the same
    order). Non-finite gradients abort before anything is modified.
    """
    flat = flatten_grads(grads) if grads and isinstance(grads[0], tuple) else list(grads)
    arrays = params.arrays()
    if len(flat) != len(arrays) or any(g.shape != a.shape for g, a in zip(flat, arrays)):
        raise ShapeMismatch("gradients are not congruent with parameters")
    for g in flat:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for a, g, m, v in zip(arrays, flat, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(a.dtype)
    return params, state


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class LrSchedule:
    kind: str  # "cosine" | "cyclic"
    total_steps: int
    lr_init: float = 1e-5
    lr_final: float = 1e-8
    lr_max: float = 1e-4
    div: float = 25.0

    def __post_init__(self):
        if self.kind not in ("cosine", "cyclic"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "cosine" and not self.lr_init >= self.lr_final > 0:
            raise ValueError("cosine schedule needs lr_init >= lr_final > 0")

    @classmethod
    def cosine(cls, lr_init, lr_final, total_steps):
        return cls("cosine", int(total_steps), lr_init=lr_init, lr_final=lr_final)

    @classmethod
    def cyclic(cls, lr_max, total_steps, div=25.0):
        return cls("cyclic", int(total_steps), lr_max=lr_max, div=div)


def lr_at(schedule: LrSchedule, step) -> float:
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise OutOfRange(f"step {step} outside [0, {total}]")
    frac = step / total if total else 0.0
    if schedule.kind == "cosine":
        lo, hi = schedule.lr_final, schedule.lr_init
        return lo + (hi - lo) * (1.0 + math.cos(math.pi * frac)) / 2.0
    # one-cycle triangle: lr_max/div -> lr_max at the midpoint -> lr_max/div
    base = schedule.lr_max / schedule.div
    return base + (schedule.lr_max - base) * (1.0 - abs(2.0 * frac - 1.0))


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred, target):
    diff = np.asarray(pred) - np.asarray(target)
    n = diff.size
    return float(np.abs(diff).sum(dtype=np.float64) / n), np.sign(diff) / n


def l2_loss(pred, target):
    diff = np.asarray(pred) - np.asarray(target)
    n = diff.size
    return float(np.square(diff, dtype=np.float64).sum() / n), 2.0 * diff / n


def bce_loss(pred, target, clamp=1e-7):
    pred = np.asarray(pred)
    if np.any((pred < 0) | (pred > 1)) or not np.all(np.isfinite(pred)):
        raise DomainError("binary cross-entropy needs predictions in [0, 1]")
    y = np.asarray(target, dtype=np.float64)
    p = np.clip(pred.astype(np.float64), clamp, 1.0 - clamp)
    n = p.size
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params, state: AdamState | None = None) -> bytes:
    """Serialize ``params`` (an :class:`MlpParams` or a plain layer list)."""
    layers = params.layers if isinstance(params, MlpParams) else list(params)
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(layers))]
    for l in layers:
        fi, fo = l.weight.shape
        parts.append(struct.pack("<IIBf", fi, fo, ACTIVATION_TAGS[l.activation], l.omega))
    for l in layers:
        parts.append(np.ascontiguousarray(l.weight, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(l.bias, dtype="<f4").tobytes())
    if state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + struct.pack("<Q3d", state.step, state.beta1, state.beta2, state.eps))
        for i in range(len(layers)):
            for buf in (state.m[2 * i], state.m[2 * i + 1], state.v[2 * i], state.v[2 * i + 1]):
                parts.append(np.ascontiguousarray(buf, dtype="<f4").tobytes())
    return b"".join(parts)


def write_checkpoint(path, params, state: AdamState | None = None):
    Path(path).write_bytes(checkpoint_bytes(params, state))


def parse_layers(data: bytes, path="<bytes>"):
    """Decode a checkpoint into ``(layers, adam_state_or_None)``."""
    off = read_header(data, WEIGHTS_MAGIC, path)
    buf, off = take(data, off, 4, path)
    (count,) = struct.unpack("<I", buf)
    specs = []
    for _ in range(count):
        buf, off = take(data, off, struct.calcsize("<IIBf"), path)
        specs.append(struct.unpack("<IIBf", buf))
    layers = []
    for fi, fo, tag, omega in specs:
        buf, off = take(data, off, 4 * fi * fo, path)
        W = np.frombuffer(buf, dtype="<f4").reshape(fi, fo).astype(np.float32)
        buf, off = take(data, off, 4 * fo, path)
        b = np.frombuffer(buf, dtype="<f4").astype(np.float32)
        layers.append(Layer(W, b, TAG_NAMES[tag], float(omega)))
    flag, off = take(data, off, 1, path)
    state = None
    if flag == b"\x01":
        buf, off = take(data, off, struct.calcsize("<Q3d"), path)
        step, b1, b2, eps = struct.unpack("<Q3d", buf)
        m, v = [], []
        for l in layers:
            bufs = []
            for shape in (l.weight.shape, l.bias.shape, l.weight.shape, l.bias.shape):
                n = int(np.prod(shape))
                buf, off = take(data, off, 4 * n, path)
                bufs.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32))
            m += bufs[:2]
            v += bufs[2:]
        state = AdamState(int(step), m, v, b1, b2, eps)
    if off != len(data):
        raise DataError(f"{path}: {len(data) - off} trailing bytes")
    return layers, state


def parse_checkpoint(data: bytes, path="<bytes>"):
    layers, state = parse_layers(data, path)
    return MlpParams(layers), state


def read_checkpoint(path):
    """Load ``(MlpParams, AdamState or None)`` from a ``RAYW`` file."""
    return parse_checkpoint(Path(path).read_bytes(), path)
