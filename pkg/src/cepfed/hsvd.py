"""Hierarchical SVD codec.

Conv tensors are flattened to ``c_out x (c_in*k_h*k_w)`` matrices and sent
as low-rank factors ``U' = U_r diag(s_r)`` and ``V_r^T``:

* part1 - energy-selected rank plus a sparse, gamma-scaled residual holding
  the largest-magnitude reconstruction errors;
* part2 - energy-selected rank only;
* part3 - output channels split into groups of ``group_channels``, each
  group truncated at a fixed rank;
* head  - dense, untouched.

A ``fixed_rank`` codec replaces every conv strategy by plain truncation at
one rank, and a ``dense`` codec ships every layer uncompressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .model import LayerSpec, ParameterSet, Part, StructuralError

ENERGY_SLACK = 1e-12


class DegenerateInputError(ValueError):
    """All singular values are zero; no rank satisfies the energy criterion."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConfig:
    eta: float = 0.9
    gamma: float = 1.0
    residual_fraction: float = 0.10
    group_channels: int = 64
    group_rank: int = 16

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.residual_fraction <= 1.0:
            raise ConfigError(f"residual_fraction must lie in [0, 1], got {self.residual_fraction}")
        if self.group_channels < 1 or self.group_rank < 1:
            raise ConfigError("group_channels and group_rank must be positive")


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    u_prime: np.ndarray  # c_o x r
    v_t: np.ndarray  # r x a
    original_shape: tuple[int, ...]

    def __post_init__(self):
        r = self.u_prime.shape[1]
        if self.u_prime.ndim != 2 or self.v_t.ndim != 2 or self.v_t.shape[0] != r:
            raise StructuralError("factor shapes do not chain")
        if r < 1 or r > min(self.u_prime.shape[0], self.v_t.shape[1]):
            raise StructuralError(f"rank {r} out of range for {self.u_prime.shape[0]}x{self.v_t.shape[1]}")

    @property
    def rank(self) -> int:
        return self.u_prime.shape[1]

    @property
    def n_scalars(self) -> int:
        return self.u_prime.size + self.v_t.size

    def product(self) -> np.ndarray:
        return self.u_prime @ self.v_t


@dataclass(frozen=True, eq=False)
class SparseResidual:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray  # already multiplied by gamma
    gamma: float

    def __len__(self):
        return len(self.values)

    def dense(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape)
        out[self.rows, self.cols] = self.values
        return out


@dataclass(frozen=True, eq=False)
class Part1Layer:
    factors: LowRankFactors
    residual: SparseResidual


@dataclass(frozen=True, eq=False)
class Part2Layer:
    factors: LowRankFactors


@dataclass(frozen=True, eq=False)
class Part3Layer:
    groups: tuple[LowRankFactors, ...]


@dataclass(frozen=True, eq=False)
class DenseLayer:
    tensor: np.ndarray


CompressedLayer = Union[Part1Layer, Part2Layer, Part3Layer, DenseLayer]


@dataclass(frozen=True, eq=False)
class CompressedUpdate:
    layers: tuple[CompressedLayer, ...]
    kind: str = "gradient"  # or "parameters"

    def __post_init__(self):
        if self.kind not in ("gradient", "parameters"):
            raise StructuralError(f"unknown update kind {self.kind!r}")
        object.__setattr__(self, "layers", tuple(self.layers))


# -- primitives ---------------------------------------------------------------

def reshape_2d(tensor: np.ndarray) -> np.ndarray:
    """Flatten the trailing three axes of a conv tensor (row-major)."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 4:
        raise StructuralError(f"expected a 4-D conv tensor, got shape {tensor.shape}")
    return tensor.reshape(tensor.shape[0], -1)


def unreshape(matrix: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return np.asarray(matrix).reshape(tuple(shape))


def select_rank(singular_values, eta: float) -> int:
    """Smallest k whose leading singular values hold a fraction >= eta of the energy."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise ValueError("need a non-empty 1-D list of singular values")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise ValueError("singular values must be non-negative and descending")
    energy = np.cumsum(s * s)
    total = energy[-1]
    if total <= 0:
        raise DegenerateInputError("all singular values are zero")
    ratio = energy / total
    return int(np.argmax(ratio >= eta - ENERGY_SLACK)) + 1


def truncated_svd(matrix: np.ndarray, original_shape: tuple[int, ...] | None = None):
    """Thin SVD as full-rank factors plus the singular values."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise StructuralError("truncated_svd takes a matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite values")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    shape = tuple(original_shape) if original_shape is not None else a.shape
    return LowRankFactors(u * s, vt, shape), s


def truncate(factors: LowRankFactors, rank: int) -> LowRankFactors:
    rank = max(1, min(rank, factors.rank))
    return LowRankFactors(
        np.ascontiguousarray(factors.u_prime[:, :rank]),
        np.ascontiguousarray(factors.v_t[:rank]),
        factors.original_shape,
    )


def _zero_factors(m: int, n: int, shape) -> LowRankFactors:
    return LowRankFactors(np.zeros((m, 1)), np.zeros((1, n)), tuple(shape))


def energy_factors(matrix: np.ndarray, eta: float, shape=None) -> LowRankFactors:
    full, s = truncated_svd(matrix, shape)
    try:
        r = select_rank(s, eta)
    except DegenerateInputError:
        return _zero_factors(*matrix.shape, full.original_shape)
    return truncate(full, r)


def fixed_factors(matrix: np.ndarray, rank: int, shape=None) -> LowRankFactors:
    full, s = truncated_svd(matrix, shape)
    if s[0] == 0:
        return _zero_factors(*matrix.shape, full.original_shape)
    return truncate(full, min(rank, *matrix.shape))


def top_residual(residual: np.ndarray, fraction: float, gamma: float) -> SparseResidual:
    """Keep the ceil(fraction*m*n) largest |entries|; ties resolved in row-major order."""
    m, n = residual.shape
    k = min(m * n, math.ceil(fraction * m * n - 1e-9))
    flat = residual.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")[:k]
    order.sort()
    rows, cols = np.divmod(order, n)
    return SparseResidual(rows.astype(np.int64), cols.astype(np.int64), gamma * flat[order], float(gamma))


# -- per-part strategies ------------------------------------------------------

def compress_part1(matrix: np.ndarray, config: EnergyConfig, shape=None) -> Part1Layer:
    a = np.asarray(matrix, dtype=np.float64)
    factors = energy_factors(a, config.eta, shape)
    if not np.any(a):
        empty = np.zeros(0, dtype=np.int64)
        return Part1Layer(factors, SparseResidual(empty, empty, np.zeros(0), float(config.gamma)))
    residual = a - factors.product()
    return Part1Layer(factors, top_residual(residual, config.residual_fraction, config.gamma))


def compress_part2(matrix: np.ndarray, config: EnergyConfig, shape=None) -> LowRankFactors:
    return energy_factors(np.asarray(matrix, dtype=np.float64), config.eta, shape)


def group_rank(config: EnergyConfig, a: int, rank: int | None = None) -> int:
    r = config.group_rank if rank is None else rank
    return min(r, config.group_channels, a)


def compress_part3(tensor: np.ndarray, config: EnergyConfig, rank: int | None = None) -> tuple[LowRankFactors, ...]:
    tensor = np.asarray(tensor, dtype=np.float64)
    c_o = tensor.shape[0]
    c = config.group_channels
    if c_o % c:
        raise ConfigError(f"{c_o} output channels not divisible by group size {c}")
    a = math.prod(tensor.shape[1:])
    r = group_rank(config, a, rank)
    groups = []
    for m in range(c_o // c):
        block = reshape_2d(tensor[m * c:(m + 1) * c])
        groups.append(fixed_factors(block, r, (c,) + tensor.shape[1:]))
    return tuple(groups)


# -- whole-model codec --------------------------------------------------------

@dataclass(frozen=True)
class Codec:
    """Which strategy to use per layer.

    ``strategy`` is ``"hsvd"``, ``"dense"`` (no compression) or
    ``"fixed_rank"`` (every conv truncated at ``rank``, no residual).
    """

    strategy: str = "hsvd"
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    rank: int | None = None

    def __post_init__(self):
        if self.strategy not in ("hsvd", "dense", "fixed_rank"):
            raise ConfigError(f"unknown codec strategy {self.strategy!r}")
        if self.strategy == "fixed_rank" and (self.rank is None or self.rank < 1):
            raise ConfigError("fixed_rank codec needs a positive rank")


def compress_layer(spec: LayerSpec, tensor: np.ndarray, codec: Codec) -> CompressedLayer:
    if spec.part is Part.HEAD or spec.kind == "dense" or codec.strategy == "dense":
        return DenseLayer(np.array(tensor, dtype=np.float64))
    cfg = codec.energy
    if codec.strategy == "fixed_rank":
        if spec.part is Part.PART3:
            return Part3Layer(compress_part3(tensor, cfg, rank=codec.rank))
        return Part2Layer(fixed_factors(reshape_2d(tensor), codec.rank, spec.shape))
    if spec.part is Part.PART1:
        return compress_part1(reshape_2d(tensor), cfg, spec.shape)
    if spec.part is Part.PART2:
        return Part2Layer(compress_part2(reshape_2d(tensor), cfg, spec.shape))
    return Part3Layer(compress_part3(tensor, cfg))


def compress(params: ParameterSet, codec: Codec | None = None, kind: str = "gradient") -> CompressedUpdate:
    codec = codec or Codec()
    return CompressedUpdate(tuple(compress_layer(s, t, codec) for s, t in params), kind)


def _check_factor_shape(f: LowRankFactors, rows: int, cols: int, name: str):
    if f.u_prime.shape[0] != rows or f.v_t.shape[1] != cols:
        raise StructuralError(f"layer {name}: factors do not match {rows}x{cols}")


def decompress_layer(layer: CompressedLayer, spec: LayerSpec) -> np.ndarray:
    if isinstance(layer, DenseLayer):
        if layer.tensor.shape != spec.shape:
            raise StructuralError(f"layer {spec.name}: dense shape {layer.tensor.shape} != {spec.shape}")
        return layer.tensor
    if spec.kind != "conv":
        raise StructuralError(f"layer {spec.name}: dense layer received factors")
    c_o = spec.shape[0]
    a = math.prod(spec.shape[1:])
    if isinstance(layer, Part1Layer):
        _check_factor_shape(layer.factors, c_o, a, spec.name)
        res = layer.residual
        if len(res) and (res.rows.max() >= c_o or res.cols.max() >= a):
            raise StructuralError(f"layer {spec.name}: residual coordinate out of range")
        mat = layer.factors.product()
        mat[res.rows, res.cols] += res.values
    elif isinstance(layer, Part2Layer):
        _check_factor_shape(layer.factors, c_o, a, spec.name)
        mat = layer.factors.product()
    elif isinstance(layer, Part3Layer):
        if not layer.groups or c_o % len(layer.groups):
            raise StructuralError(f"layer {spec.name}: {len(layer.groups)} groups for {c_o} channels")
        c = c_o // len(layer.groups)
        for g in layer.groups:
            _check_factor_shape(g, c, a, spec.name)
        mat = np.concatenate([g.product() for g in layer.groups], axis=0)
    else:
        raise StructuralError(f"unknown compressed layer type {type(layer).__name__}")
    return unreshape(mat, spec.shape)


def decompress(update: CompressedUpdate, specs: Sequence[LayerSpec]) -> ParameterSet:
    if len(update.layers) != len(specs):
        raise StructuralError(f"update has {len(update.layers)} layers, model has {len(specs)}")
    return ParameterSet(tuple(specs), tuple(decompress_layer(l, s) for l, s in zip(update.layers, specs)))


# -- accounting ---------------------------------------------------------------

def layer_scalars(layer: CompressedLayer) -> int:
    """Scalars shipped for a layer; each residual entry counts as 3 (row, col, value)."""
    if isinstance(layer, DenseLayer):
        return layer.tensor.size
    if isinstance(layer, Part1Layer):
        return layer.factors.n_scalars + 3 * len(layer.residual)
    if isinstance(layer, Part2Layer):
        return layer.factors.n_scalars
    return sum(g.n_scalars for g in layer.groups)


def transmission_ratio(update: CompressedUpdate, specs: Sequence[LayerSpec]) -> float:
    total = sum(s.size for s in specs)
    return sum(layer_scalars(l) for l in update.layers) / total


def layer_rank(layer: CompressedLayer) -> float | None:
    if isinstance(layer, Part1Layer):
        return float(layer.factors.rank)
    if isinstance(layer, Part2Layer):
        return float(layer.factors.rank)
    if isinstance(layer, Part3Layer):
        return float(np.mean([g.rank for g in layer.groups]))
    return None


def ranks_by_part(update: CompressedUpdate, specs: Sequence[LayerSpec]) -> dict[Part, list[float]]:
    out: dict[Part, list[float]] = {Part.PART1: [], Part.PART2: [], Part.PART3: []}
    for layer, spec in zip(update.layers, specs):
        r = layer_rank(layer)
        if r is not None and spec.part in out:
            out[spec.part].append(r)
    return out
