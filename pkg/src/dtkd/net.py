"""Tiny ReLU MLP with hand-written backprop, momentum SGD and the LR schedule."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dtkd.numkit import DomainError, make_rng

CKPT_MAGIC = b"DTKD"
CKPT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise DomainError(f"need at least two positive layer sizes, got {sizes}")
        if self.activation != "relu":
            raise DomainError(f"unsupported activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray] = field(repr=False)


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 120
    warmup_epochs: int = 10
    decay_milestones: tuple[int, ...] = (75, 90, 105)
    decay_factor: float = 0.1
    batch_size: int = 64
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "decay_milestones", tuple(int(m) for m in self.decay_milestones))
        ms = self.decay_milestones
        if not self.base_lr > 0:
            raise DomainError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs/warmup must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise DomainError("warmup_epochs must be smaller than epochs")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise DomainError("decay milestones must be strictly increasing")
        if ms and self.epochs > 0 and ms[-1] >= self.epochs:
            raise DomainError("decay milestones must be smaller than epochs")
        if not 0 < self.decay_factor < 1:
            raise DomainError("decay_factor must be in (0, 1)")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward(params: MlpParams, batch) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise DomainError(
            f"batch shape {x.shape} does not match input dim {params.weights[0].shape[0]}")
    pres, acts = [], [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pres.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
    return pres[-1], ForwardCache(x, pres, acts)


def predict(params: MlpParams, features) -> np.ndarray:
    return forward(params, features)[0]


def backward(params: MlpParams, cache: ForwardCache, logit_gradient) -> MlpParams:
    """Parameter gradients for a loss whose logit gradient is supplied.

    ``logit_gradient`` must already include any 1/N batch averaging.
    """
    g = np.asarray(logit_gradient, dtype=np.float64)
    if len(cache.pre_activations) != len(params.weights) or g.shape != cache.pre_activations[-1].shape:
        raise DomainError("stale cache: gradient shape does not match the forward pass")
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        gw[i] = cache.activations[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * (cache.pre_activations[i - 1] > 0)
    return MlpParams(gw, gb)


def zero_velocity(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases])


def sgd_step(params: MlpParams, grads: MlpParams, schedule: TrainSchedule,
             velocity: MlpParams, lr_now: float) -> tuple[MlpParams, MlpParams]:
    """Momentum SGD with coupled weight decay, updated in place and returned."""
    m, wd = schedule.momentum, schedule.weight_decay
    for p, g, v in zip(params.arrays(), grads.arrays(), velocity.arrays()):
        if p.shape != g.shape or p.shape != v.shape:
            raise DomainError("parameter, gradient and velocity shapes differ")
        v *= m
        v += g
        if wd:
            v += wd * p
        p -= lr_now * v
    return params, velocity


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise DomainError(f"epoch {epoch} outside [0, {schedule.epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    passed = sum(1 for m in schedule.decay_milestones if epoch >= m)
    return schedule.base_lr * schedule.decay_factor ** passed


# -- checkpoint file -------------------------------------------------------------
# "DTKD" | u16 version | u32 n_layers | u32 sizes[n_layers + 1] |
# per layer: f32 weights (fan_in x fan_out, row-major), f32 biases. Little-endian.

def store_checkpoint(params: MlpParams, path) -> None:
    sizes = params.layer_sizes
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HI", CKPT_VERSION, len(params.weights))
    out += struct.pack(f"<{len(sizes)}I", *sizes)
    for w, b in zip(params.weights, params.biases):
        out += np.ascontiguousarray(w, dtype="<f4").tobytes()
        out += np.ascontiguousarray(b, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> MlpParams:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic at offset 0")
    if len(data) < 10:
        raise ValueError(f"{path}: truncated checkpoint header at offset {len(data)}")
    version, n_layers = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at offset 4")
    off = 10
    if n_layers < 1 or len(data) < off + 4 * (n_layers + 1):
        raise ValueError(f"{path}: bad layer table at offset {off}")
    sizes = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += 4 * (n_layers + 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        need = 4 * (fan_in * fan_out + fan_out)
        if len(data) < off + need:
            raise ValueError(f"{path}: truncated checkpoint at offset {len(data)}")
        w = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=off)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes at offset {off}")
    return MlpParams(weights, biases)


def new_params(spec: MlpSpec, seed: int) -> MlpParams:
    return init_params(spec, make_rng(seed))
