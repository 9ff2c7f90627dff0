"""Byte-exact message codec for client/server traffic.

All integers and floats are little-endian. Tensors travel as float32.

Envelope (21-byte header, 4-byte trailer)::

    magic      4s   b"CEPF"
    version    u16  1
    kind       u8   1 = upload, 2 = download
    round      u32
    client     u16
    length     u64  payload byte count
    payload    length bytes
    crc32      u32  zlib.crc32 of every preceding byte

Upload payload::

    alignment  f64
    n_samples  u32
    update     gradient
    update     parameters

Download payload: three updates (global model, average gradient, risk
gradient), every layer sent dense.

Update::

    kind       u8   0 = gradient, 1 = parameters
    n_layers   u32
    layer records

Layer record::

    part       u8   1..4 = part1, part2, part3, head
    variant    u8   0 = dense, 1 = factors + residual, 2 = factors, 3 = groups
    shape      4 x u32 (dense 2-D shapes are padded with zeros)
    body:
      dense    f32 x prod(shape)
      factors  r u32, U' f32 (rows x r), V^T f32 (r x a)
      residual count u32, count x (row u32, col u32, value f32), gamma f32
      groups   M u32, then M factor blocks over (c_out / M) x a

For a model with L layers the dense update is
``5 + sum(18 + 4 * size_l)`` bytes, so a download is
``25 + 3 * (5 + sum(18 + 4 * size_l))`` bytes and an empty upload is 47.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hsvd import (
    CompressedLayer,
    CompressedUpdate,
    DenseLayer,
    LowRankFactors,
    Part1Layer,
    Part2Layer,
    Part3Layer,
    SparseResidual,
)
from .model import PART_CODES, LayerSpec, ParameterSet, Part

MAGIC = b"CEPF"
VERSION = 1
KIND_UPLOAD = 1
KIND_DOWNLOAD = 2

_HEADER = struct.Struct("<4sHBIHQ")
_CRC = struct.Struct("<I")
HEADER_BYTES = _HEADER.size
ENVELOPE_BYTES = HEADER_BYTES + _CRC.size
LAYER_HEADER_BYTES = 18
UPDATE_HEADER_BYTES = 5
MAX_ELEMENTS = 1 << 31

_VARIANT_DENSE, _VARIANT_P1, _VARIANT_FACTORS, _VARIANT_GROUPS = 0, 1, 2, 3
_UPDATE_KINDS = {"gradient": 0, "parameters": 1}
_PARTS_BY_CODE = {v: k for k, v in PART_CODES.items()}
_ENTRY = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f4")])


class WireError(ValueError):
    pass


class TruncatedError(WireError):
    pass


class BadMagicError(WireError):
    pass


class VersionError(WireError):
    pass


class ChecksumError(WireError):
    pass


class ShapeError(WireError):
    pass


class FormatError(WireError):
    """Unknown tag, wrong message kind or trailing bytes."""


@dataclass(frozen=True, eq=False)
class UploadPayload:
    gradient: CompressedUpdate
    parameters: CompressedUpdate
    alignment: float
    n_samples: int
    round_index: int = 0
    client_id: int = 0


@dataclass(frozen=True, eq=False)
class DownloadPayload:
    global_model: CompressedUpdate
    avg_gradient: CompressedUpdate
    risk_gradient: CompressedUpdate
    round_index: int = 0
    client_id: int = 0


def dense_update(params: ParameterSet, kind: str = "parameters") -> CompressedUpdate:
    return CompressedUpdate(tuple(DenseLayer(t) for t in params.tensors), kind)


# -- writing ------------------------------------------------------------------

def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _write_factors(out: list, f: LowRankFactors):
    out.append(struct.pack("<I", f.rank))
    out.append(_f32(f.u_prime))
    out.append(_f32(f.v_t))


def _layer_shape(layer: CompressedLayer) -> tuple[int, ...]:
    if isinstance(layer, DenseLayer):
        return layer.tensor.shape
    if isinstance(layer, (Part1Layer, Part2Layer)):
        return layer.factors.original_shape
    groups = layer.groups
    c = groups[0].original_shape[0]
    return (c * len(groups),) + tuple(groups[0].original_shape[1:])


def _part_of(layer: CompressedLayer, shape) -> Part:
    if isinstance(layer, Part1Layer):
        return Part.PART1
    if isinstance(layer, Part2Layer):
        return Part.PART2
    if isinstance(layer, Part3Layer):
        return Part.PART3
    return Part.HEAD if len(shape) == 2 else Part.PART2


def _write_update(out: list, update: CompressedUpdate, parts: Sequence[Part] | None = None):
    out.append(struct.pack("<BI", _UPDATE_KINDS[update.kind], len(update.layers)))
    for i, layer in enumerate(update.layers):
        shape = tuple(_layer_shape(layer))
        part = parts[i] if parts is not None else _part_of(layer, shape)
        if len(shape) not in (2, 4):
            raise ShapeError(f"cannot encode a {len(shape)}-D tensor")
        padded = shape + (0,) * (4 - len(shape))
        if isinstance(layer, DenseLayer):
            variant = _VARIANT_DENSE
        elif isinstance(layer, Part1Layer):
            variant = _VARIANT_P1
        elif isinstance(layer, Part2Layer):
            variant = _VARIANT_FACTORS
        else:
            variant = _VARIANT_GROUPS
        out.append(struct.pack("<BB4I", PART_CODES[Part(part)], variant, *padded))
        if variant == _VARIANT_DENSE:
            out.append(_f32(layer.tensor))
        elif variant == _VARIANT_GROUPS:
            out.append(struct.pack("<I", len(layer.groups)))
            for g in layer.groups:
                _write_factors(out, g)
        else:
            _write_factors(out, layer.factors)
            if variant == _VARIANT_P1:
                res = layer.residual
                entries = np.empty(len(res), dtype=_ENTRY)
                entries["row"] = res.rows
                entries["col"] = res.cols
                entries["value"] = res.values
                out.append(struct.pack("<I", len(res)))
                out.append(entries.tobytes())
                out.append(struct.pack("<f", res.gamma))


def _envelope(kind: int, round_index: int, client_id: int, payload: bytes) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, kind, round_index, client_id, len(payload))
    body = head + payload
    return body + _CRC.pack(zlib.crc32(body))


def encode_update(update: CompressedUpdate, parts: Sequence[Part] | None = None) -> bytes:
    out: list = []
    _write_update(out, update, parts)
    return b"".join(out)


def encode_upload(payload: UploadPayload, parts: Sequence[Part] | None = None) -> bytes:
    """Serialize an upload; ``parts`` overrides the part tag written per layer."""
    out = [struct.pack("<dI", payload.alignment, payload.n_samples)]
    _write_update(out, payload.gradient, parts)
    _write_update(out, payload.parameters, parts)
    return _envelope(KIND_UPLOAD, payload.round_index, payload.client_id, b"".join(out))


def encode_download(payload: DownloadPayload, parts: Sequence[Part] | None = None) -> bytes:
    out: list = []
    for upd in (payload.global_model, payload.avg_gradient, payload.risk_gradient):
        for layer in upd.layers:
            if not isinstance(layer, DenseLayer):
                raise FormatError("download messages carry dense layers only")
        _write_update(out, upd, parts)
    return _envelope(KIND_DOWNLOAD, payload.round_index, payload.client_id, b"".join(out))


# -- reading ------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0
        self.numeric = 0  # bytes of tensor values and residual entries read

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        view = self.buf[self.pos:self.pos + n]
        self.pos += n
        return view

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def f32(self, count: int, shape) -> np.ndarray:
        if count > MAX_ELEMENTS:
            raise ShapeError(f"array of {count} elements exceeds limit")
        raw = self.take(4 * count)
        self.numeric += 4 * count
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _read_factors(rd: _Reader, rows: int, cols: int, shape) -> LowRankFactors:
    (r,) = rd.unpack("<I")
    if r < 1 or r > min(rows, cols):
        raise ShapeError(f"rank {r} impossible for a {rows}x{cols} matrix")
    u = rd.f32(rows * r, (rows, r))
    v = rd.f32(r * cols, (r, cols))
    return LowRankFactors(u, v, tuple(shape))


def _read_update(rd: _Reader) -> tuple[CompressedUpdate, list[Part]]:
    kind_code, n_layers = rd.unpack("<BI")
    kinds = {v: k for k, v in _UPDATE_KINDS.items()}
    if kind_code not in kinds:
        raise FormatError(f"unknown update kind {kind_code}")
    layers, parts = [], []
    for _ in range(n_layers):
        part_code, variant, *dims = rd.unpack("<BB4I")
        if part_code not in _PARTS_BY_CODE:
            raise FormatError(f"unknown part tag {part_code}")
        if dims[2] == 0 and dims[3] == 0 and dims[0] and dims[1]:
            shape = (dims[0], dims[1])
        elif all(dims):
            shape = tuple(dims)
        else:
            raise ShapeError(f"malformed shape {dims}")
        size = math.prod(shape)
        if size > MAX_ELEMENTS:
            raise ShapeError(f"shape {shape} overflows the element limit")
        rows, cols = shape[0], size // shape[0]
        if variant == _VARIANT_DENSE:
            layer = DenseLayer(rd.f32(size, shape))
        elif len(shape) != 4:
            raise ShapeError("factorized layers must have a 4-D shape")
        elif variant in (_VARIANT_P1, _VARIANT_FACTORS):
            factors = _read_factors(rd, rows, cols, shape)
            if variant == _VARIANT_FACTORS:
                layer = Part2Layer(factors)
            else:
                (count,) = rd.unpack("<I")
                if count > size:
                    raise ShapeError(f"{count} residual entries for {size} coordinates")
                entries = np.frombuffer(rd.take(count * _ENTRY.itemsize), dtype=_ENTRY)
                rd.numeric += count * _ENTRY.itemsize
                (gamma,) = rd.unpack("<f")
                r_idx = entries["row"].astype(np.int64)
                c_idx = entries["col"].astype(np.int64)
                if count and (r_idx.max() >= rows or c_idx.max() >= cols):
                    raise ShapeError("residual coordinate out of range")
                if len(np.unique(r_idx * cols + c_idx)) != count:
                    raise ShapeError("duplicate residual coordinates")
                res = SparseResidual(r_idx, c_idx, entries["value"].astype(np.float64), float(gamma))
                layer = Part1Layer(factors, res)
        elif variant == _VARIANT_GROUPS:
            (m,) = rd.unpack("<I")
            if m < 1 or rows % m:
                raise ShapeError(f"{m} groups cannot split {rows} channels")
            c = rows // m
            gshape = (c,) + shape[1:]
            layer = Part3Layer(tuple(_read_factors(rd, c, cols, gshape) for _ in range(m)))
        else:
            raise FormatError(f"unknown layer variant {variant}")
        layers.append(layer)
        parts.append(_PARTS_BY_CODE[part_code])
    return CompressedUpdate(tuple(layers), kinds[kind_code]), parts


@dataclass(frozen=True)
class Header:
    kind: int
    round_index: int
    client_id: int
    payload_length: int


def read_envelope(buf: bytes, expect_kind: int | None = None) -> tuple[Header, bytes]:
    buf = bytes(buf)
    if len(buf) < HEADER_BYTES:
        raise TruncatedError(f"message of {len(buf)} bytes is shorter than the header")
    magic, version, kind, round_index, client_id, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported wire version {version}")
    expected = HEADER_BYTES + length + _CRC.size
    if len(buf) < expected:
        raise TruncatedError(f"payload length says {length} bytes but message has {len(buf)} total")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after message")
    (crc,) = _CRC.unpack_from(buf, expected - _CRC.size)
    if zlib.crc32(buf[:expected - _CRC.size]) != crc:
        raise ChecksumError("crc32 mismatch")
    if kind not in (KIND_UPLOAD, KIND_DOWNLOAD):
        raise FormatError(f"unknown message kind {kind}")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected message kind {expect_kind}, got {kind}")
    return Header(kind, round_index, client_id, length), buf[HEADER_BYTES:expected - _CRC.size]


def decode_upload(buf: bytes) -> UploadPayload:
    header, payload = read_envelope(buf, KIND_UPLOAD)
    rd = _Reader(payload)
    alignment, n_samples = rd.unpack("<dI")
    grad, _ = _read_update(rd)
    params, _ = _read_update(rd)
    if not rd.done():
        raise FormatError("trailing bytes inside upload payload")
    return UploadPayload(grad, params, alignment, n_samples, header.round_index, header.client_id)


def decode_download(buf: bytes) -> DownloadPayload:
    header, payload = read_envelope(buf, KIND_DOWNLOAD)
    rd = _Reader(payload)
    ups = [_read_update(rd)[0] for _ in range(3)]
    if not rd.done():
        raise FormatError("trailing bytes inside download payload")
    for upd in ups:
        if not all(isinstance(l, DenseLayer) for l in upd.layers):
            raise FormatError("download messages carry dense layers only")
    return DownloadPayload(*ups, round_index=header.round_index, client_id=header.client_id)


def dense_update_bytes(specs: Sequence[LayerSpec]) -> int:
    return UPDATE_HEADER_BYTES + sum(LAYER_HEADER_BYTES + 4 * s.size for s in specs)


def download_bytes(specs: Sequence[LayerSpec]) -> int:
    return ENVELOPE_BYTES + 3 * dense_update_bytes(specs)


def scalar_bytes(encoded: bytes) -> int:
    """Bytes of numeric content in an encoded update, found by parsing it.

    Counts factor and dense float32 values plus full residual entries
    (row, col, value = 12 bytes); headers, ranks, counts and gamma are
    structural and excluded.
    """
    rd = _Reader(encoded)
    _read_update(rd)
    if not rd.done():
        raise FormatError("trailing bytes after update")
    return rd.numeric


def measured_ratio(update: CompressedUpdate, specs: Sequence[LayerSpec]) -> float:
    """Transmission ratio taken from the encoded byte stream."""
    return scalar_bytes(encode_update(update)) / (4 * sum(s.size for s in specs))
