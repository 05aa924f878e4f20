"""Symmetric uniform weight quantization.

Scales are max-abs derived (per tensor or per output row), integers live in
[-(2^{bit-1}-1), 2^{bit-1}-1], and 4-bit integers are stored packed two per
byte. No zero-point, no activation quantization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"


def integer_bounds(bit: int) -> tuple[int, int]:
    """Symmetric integer range for a bit width, e.g. 4 -> (-7, 7)."""
    if bit < 2:
        raise ValueError(f"integer_bounds: bit={bit} < 2")
    u = 2 ** (bit - 1) - 1
    return -u, u


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantSpec:
    bit: int = 4
    granularity: str = PER_CHANNEL

    def __post_init__(self):
        if self.bit < 2:
            raise ValueError(f"QuantSpec: bit={self.bit} < 2")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ValueError(f"QuantSpec: bad granularity {self.granularity!r}")

    @property
    def l(self) -> int:
        return integer_bounds(self.bit)[0]

    @property
    def u(self) -> int:
        return integer_bounds(self.bit)[1]


@dataclass
class ScaleSet:
    scales: np.ndarray  # length 1 (per_tensor) or M (per_channel), all >= 0
    granularity: str

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32).reshape(-1)
        if np.any(self.scales < 0):
            raise ValueError("ScaleSet: negative scale")

    def column(self, rows: int) -> np.ndarray:
        """Scales broadcast to one value per row, shape [rows, 1]."""
        if self.granularity == PER_TENSOR:
            return np.full((rows, 1), self.scales[0], dtype=np.float32)
        if len(self.scales) != rows:
            raise ValueError(f"ScaleSet: {len(self.scales)} scales for {rows} rows")
        return self.scales.reshape(rows, 1)


@dataclass
class QuantizedTensor:
    qdata: np.ndarray  # packed uint8 when bit == 4, else int8
    scales: ScaleSet
    shape: tuple
    bit: int

    def integers(self) -> np.ndarray:
        """Unpacked integer matrix, shape == self.shape, dtype int8."""
        if self.bit == 4:
            return unpack_int4(self.qdata, int(np.prod(self.shape))).reshape(self.shape)
        return self.qdata.reshape(self.shape)

    def nbytes(self) -> int:
        """Payload bytes: packed integers plus float32 scales."""
        return int(self.qdata.nbytes + self.scales.scales.nbytes)


def pack_int4(values: np.ndarray) -> np.ndarray:
    """Pack int4 values (in [-8, 7]) two per byte; low nibble = even index."""
    v = values.reshape(-1).astype(np.int8)
    if v.size % 2:
        v = np.concatenate([v, np.zeros(1, dtype=np.int8)])
    lo = v[0::2].astype(np.uint8) & 0x0F
    hi = (v[1::2].astype(np.uint8) & 0x0F) << 4
    return (lo | hi).astype(np.uint8)


def unpack_int4(packed: np.ndarray, count: int) -> np.ndarray:
    """Inverse of pack_int4; `count` trims the possible padding nibble."""
    lo = (packed & 0x0F).astype(np.int8)
    hi = ((packed >> 4) & 0x0F).astype(np.int8)
    # sign-extend two's-complement nibbles
    lo = np.where(lo > 7, lo - 16, lo).astype(np.int8)
    hi = np.where(hi > 7, hi - 16, hi).astype(np.int8)
    out = np.empty(packed.size * 2, dtype=np.int8)
    out[0::2] = lo
    out[1::2] = hi
    return out[:count]


def _rows(w: np.ndarray) -> np.ndarray:
    """View a weight tensor as [rows, cols]; rows are output channels."""
    if w.ndim == 1:
        return w.reshape(1, -1)
    return w.reshape(w.shape[0], -1)


def compute_scale(w: np.ndarray, spec: QuantSpec) -> ScaleSet:
    """Max-abs derived scales: per row for per_channel, global otherwise."""
    w = np.asarray(w, dtype=np.float32)
    if w.size == 0:
        raise ValueError("compute_scale: empty tensor")
    if spec.granularity == PER_CHANNEL:
        s = np.abs(_rows(w)).max(axis=1) / spec.u
    else:
        s = np.array([np.abs(w).max() / spec.u])
    return ScaleSet(s.astype(np.float32), spec.granularity)


def fake_quant(w: np.ndarray, scales: ScaleSet, spec: QuantSpec) -> np.ndarray:
    """s * clip(round(w / s), l, u) per channel; zero-scale channels -> 0."""
    w = np.asarray(w, dtype=np.float32)
    w2 = _rows(w)
    s = scales.column(w2.shape[0])
    safe = np.where(s == 0, 1.0, s).astype(np.float32)
    q = np.clip(round_half_away(w2 / safe), spec.l, spec.u)
    out = (s * q).astype(np.float32)
    return out.reshape(w.shape)


def quantize(w: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Materialize integers with max-abs scales (clipping is then a no-op)."""
    w = np.asarray(w, dtype=np.float32)
    scales = compute_scale(w, spec)
    w2 = _rows(w)
    s = scales.column(w2.shape[0])
    safe = np.where(s == 0, 1.0, s).astype(np.float32)
    q = np.clip(round_half_away(w2 / safe), spec.l, spec.u).astype(np.int8)
    if spec.bit == 4:
        qdata = pack_int4(q)
    else:
        qdata = q.reshape(-1)
    return QuantizedTensor(qdata, scales, w.shape, spec.bit)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """s_i * q_ij as float32."""
    ints = _rows(q.integers().astype(np.float32))
    s = q.scales.column(ints.shape[0])
    return (s * ints).astype(np.float32).reshape(q.shape)
