"""Small conv nets with hand-written forward/backward passes.

Layers are either valid-padding stride-1 convolutions (weights shaped
``(c_out, c_in, k_h, k_w)``) or dense layers (``(out, in)``); there are no
biases. Every conv is followed by ReLU, the feature map is globally
average-pooled, and the dense head produces logits. Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Part(str, Enum):
    PART1 = "part1"
    PART2 = "part2"
    PART3 = "part3"
    HEAD = "head"


PART_CODES = {Part.PART1: 1, Part.PART2: 2, Part.PART3: 3, Part.HEAD: 4}


class StructuralError(ValueError):
    """Shapes or layer lists do not line up."""


class NumericError(FloatingPointError):
    """A non-finite value showed up during a pass."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "dense"
    shape: tuple[int, ...]
    part: Part

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        want = 4 if self.kind == "conv" else 2
        if len(self.shape) != want or min(self.shape) < 1:
            raise StructuralError(f"layer {self.name}: bad {self.kind} shape {self.shape}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "part", Part(self.part))

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def validate_partition(specs: Sequence[LayerSpec], group_channels: int | None = None) -> None:
    """Check the part tagging used by the compression codec.

    Exactly one Part1 layer, a single contiguous Head run at the end holding
    every dense layer, and Part3 conv widths divisible by ``group_channels``.
    """
    parts = [s.part for s in specs]
    if parts.count(Part.PART1) != 1:
        raise StructuralError("exactly one layer must be tagged part1")
    head_idx = [i for i, p in enumerate(parts) if p is Part.HEAD]
    if not head_idx or head_idx != list(range(head_idx[0], len(specs))):
        raise StructuralError("head layers must form one contiguous run at the end")
    for s in specs:
        if s.kind == "dense" and s.part is not Part.HEAD:
            raise StructuralError(f"dense layer {s.name} must be tagged head")
        if s.kind == "conv" and s.part is Part.HEAD:
            raise StructuralError(f"conv layer {s.name} cannot be tagged head")
        if group_channels and s.part is Part.PART3 and s.shape[0] % group_channels:
            raise StructuralError(
                f"part3 layer {s.name} has {s.shape[0]} output channels, "
                f"not divisible by group size {group_channels}"
            )


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Ordered named tensors; used for weights, gradients and deltas alike."""

    specs: tuple[LayerSpec, ...]
    tensors: tuple[np.ndarray, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        if len(specs) != len(self.tensors):
            raise StructuralError("one tensor per layer spec required")
        tensors = []
        for spec, t in zip(specs, self.tensors):
            arr = np.array(t, dtype=np.float64)
            if arr.shape != spec.shape:
                raise StructuralError(f"layer {spec.name}: tensor shape {arr.shape} != {spec.shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in layer {spec.name}", spec.name)
            arr.setflags(write=False)
            tensors.append(arr)
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "tensors", tuple(tensors))

    @classmethod
    def zeros(cls, specs: Sequence[LayerSpec]) -> "ParameterSet":
        return cls(tuple(specs), tuple(np.zeros(s.shape) for s in specs))

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(zip(self.specs, self.tensors))

    def __getitem__(self, name: str) -> np.ndarray:
        for spec, t in self:
            if spec.name == name:
                return t
        raise KeyError(name)

    @property
    def size(self) -> int:
        return sum(s.size for s in self.specs)

    def check_compatible(self, other: "ParameterSet") -> None:
        if self.specs != other.specs:
            raise StructuralError("parameter sets have different layer specs")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet(self.specs, tuple(fn(t) for t in self.tensors))

    def zip_map(self, other: "ParameterSet", fn) -> "ParameterSet":
        self.check_compatible(other)
        return ParameterSet(self.specs, tuple(fn(a, b) for a, b in zip(self.tensors, other.tensors)))

    def __add__(self, other):
        return self.zip_map(other, np.add)

    def __sub__(self, other):
        return self.zip_map(other, np.subtract)

    def __mul__(self, scalar: float):
        return self.map(lambda t: t * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors]) if self.tensors else np.zeros(0)

    @classmethod
    def from_flat(cls, specs: Sequence[LayerSpec], vector: np.ndarray) -> "ParameterSet":
        out, pos = [], 0
        for s in specs:
            out.append(np.asarray(vector[pos:pos + s.size]).reshape(s.shape))
            pos += s.size
        if pos != len(vector):
            raise StructuralError("flat vector length does not match specs")
        return cls(tuple(specs), tuple(out))

    def allclose(self, other: "ParameterSet", rtol=0.0, atol=0.0) -> bool:
        return self.specs == other.specs and all(
            np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.tensors, other.tensors)
        )


def weighted_sum(weights: Iterable[float], sets: Sequence[ParameterSet]) -> ParameterSet:
    """Return sum_k weights[k] * sets[k]."""
    weights = list(weights)
    if len(weights) != len(sets) or not sets:
        raise StructuralError("need one weight per parameter set and at least one set")
    specs = sets[0].specs
    for s in sets[1:]:
        sets[0].check_compatible(s)
    out = [np.zeros(sp.shape) for sp in specs]
    for w, ps in zip(weights, sets):
        if w == 0.0:
            continue
        for acc, t in zip(out, ps.tensors):
            acc += float(w) * t
    return ParameterSet(specs, tuple(out))


def dot(a: ParameterSet, b: ParameterSet) -> float:
    """Sum over every layer (head included) of the elementwise products."""
    a.check_compatible(b)
    return float(sum(np.vdot(x, y) for x, y in zip(a.tensors, b.tensors)))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (batch, channels, height, width)
    labels: np.ndarray  # int class ids

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 4 or x.shape[0] < 1:
            raise StructuralError(f"inputs must be (batch, c, h, w), got {x.shape}")
        if y.shape != (x.shape[0],):
            raise StructuralError("one label per input required")
        if y.min() < 0:
            raise StructuralError("labels must be non-negative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]


def tinyconv_specs(
    in_channels: int = 3,
    n_classes: int = 3,
    widths: Sequence[int] = (8, 16, 16, 64, 64),
    kernel: int = 3,
) -> tuple[LayerSpec, ...]:
    """Five 3x3 convs split 1/2/2 across Part1/Part2/Part3, then a dense head."""
    if len(widths) != 5:
        raise StructuralError("TinyConv takes exactly five conv widths")
    parts = [Part.PART1, Part.PART2, Part.PART2, Part.PART3, Part.PART3]
    specs, c_in = [], in_channels
    for i, (w, p) in enumerate(zip(widths, parts), start=1):
        specs.append(LayerSpec(f"conv{i}", "conv", (w, c_in, kernel, kernel), p))
        c_in = w
    specs.append(LayerSpec("fc", "dense", (n_classes, c_in), Part.HEAD))
    return tuple(specs)


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator) -> ParameterSet:
    """He-normal convs, LeCun-normal dense layers."""
    tensors = []
    for s in specs:
        fan_in = math.prod(s.shape[1:])
        gain = 2.0 if s.kind == "conv" else 1.0
        tensors.append(rng.normal(0.0, math.sqrt(gain / fan_in), size=s.shape))
    return ParameterSet(tuple(specs), tuple(tensors))


# -- forward / backward -------------------------------------------------------

# Activations are kept channels-last (b, h, w, c) internally; im2col copies
# are then contiguous along the channel axis.

def _conv_forward(x: np.ndarray, w: np.ndarray):
    b, h, wd, c_in = x.shape
    c_out, wc_in, kh, kw = w.shape
    if wc_in != c_in:
        raise StructuralError(f"conv expects {wc_in} input channels, got {c_in}")
    if h < kh or wd < kw:
        raise StructuralError(f"input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, wd - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # b, ho, wo, c_in, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c_in)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(c_out, -1).T
    return out.reshape(b, ho, wo, c_out), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    c_out, c_in, kh, kw = w.shape
    d2 = dout.reshape(-1, c_out)
    dw = (d2.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
    if not need_dx:
        return dw, None
    # input gradient = full correlation of dout with the flipped, transposed kernel
    padded = np.pad(dout, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = _conv_forward(padded, w_flip)
    return dw, dx


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation in layer {layer}", layer)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(len(labels)), labels].mean()
    return float(loss), log_p


def _run(model: ParameterSet, batch: Batch, want_grad: bool):
    x = batch.inputs.transpose(0, 2, 3, 1)
    n_classes = model.specs[-1].shape[0] if model.specs else 0
    if model.specs[-1].kind != "dense":
        raise StructuralError("last layer must be dense")
    if batch.labels.max() >= n_classes:
        raise StructuralError(f"label out of range for {n_classes} classes")
    tape = []
    pooled = False
    for spec, w in model:
        if spec.kind == "conv":
            if pooled:
                raise StructuralError("conv layer after dense layer")
            pre, cols = _conv_forward(x, w)
            tape.append((spec, cols, pre))
            x = np.maximum(pre, 0.0)
        else:
            if not pooled:
                pool_shape = x.shape
                x = x.mean(axis=(1, 2))
                tape.append(("pool", pool_shape))
                pooled = True
            if x.shape[1] != spec.shape[1]:
                raise StructuralError(f"layer {spec.name} expects {spec.shape[1]} inputs, got {x.shape[1]}")
            z = x @ w.T
            tape.append((spec, x, z))
            x = z if spec is model.specs[-1] else np.maximum(z, 0.0)
        _check_finite(x, spec.name)
    logits = x
    loss, log_p = _softmax_xent(logits, batch.labels)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss", model.specs[-1].name)
    if not want_grad:
        return logits, loss, None

    n = len(batch)
    g = np.exp(log_p)
    g[np.arange(n), batch.labels] -= 1.0
    g /= n
    grads = {}
    last, first = model.specs[-1], model.specs[0]
    for entry in reversed(tape):
        if entry[0] == "pool":
            shape = entry[1]
            g = np.broadcast_to(g[:, None, None, :], shape) / (shape[1] * shape[2])
            continue
        spec, saved, pre = entry
        if spec is not last:
            g = g * (pre > 0)
        w = model[spec.name]
        if spec.kind == "dense":
            grads[spec.name] = g.T @ saved
            g = g @ w
        else:
            dw, g = _conv_backward(np.ascontiguousarray(g), saved, w, need_dx=spec is not first)
            grads[spec.name] = dw
    grad = ParameterSet(model.specs, tuple(grads[s.name] for s in model.specs))
    return logits, loss, grad


def forward(model: ParameterSet, batch: Batch) -> tuple[np.ndarray, float]:
    """Return ``(logits, mean cross-entropy)``."""
    logits, loss, _ = _run(model, batch, want_grad=False)
    return logits, loss


def backward(model: ParameterSet, batch: Batch) -> ParameterSet:
    """Gradient of the mean cross-entropy with respect to every weight."""
    return _run(model, batch, want_grad=True)[2]


def loss_and_grad(model: ParameterSet, batch: Batch) -> tuple[float, ParameterSet]:
    _, loss, grad = _run(model, batch, want_grad=True)
    return loss, grad


def predict(model: ParameterSet, inputs: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = []
    for start in range(0, len(inputs), chunk):
        x = inputs[start:start + chunk]
        logits, _ = forward(model, Batch(x, np.zeros(len(x), dtype=np.int64)))
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# -- Adam ---------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, specs: Sequence[LayerSpec], lr: float = 1e-4, **kw) -> "OptimizerState":
        zeros = ParameterSet.zeros(specs)
        return cls(m=zeros, v=zeros, lr=lr, **kw)


def adam_step(model: ParameterSet, grad: ParameterSet, state: OptimizerState):
    """One bias-corrected Adam update. Returns ``(new_model, new_state)``."""
    model.check_compatible(grad)
    model.check_compatible(state.m)
    model.check_compatible(state.v)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.zip_map(grad, lambda m_, g: b1 * m_ + (1 - b1) * g)
    v = state.v.zip_map(grad, lambda v_, g: b2 * v_ + (1 - b2) * g * g)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [
        w - state.lr * (mt / c1) / (np.sqrt(vt / c2) + state.eps)
        for w, mt, vt in zip(model.tensors, m.tensors, v.tensors)
    ]
    new_state = OptimizerState(m, v, t, state.lr, b1, b2, state.eps)
    return ParameterSet(model.specs, tuple(new)), new_state
