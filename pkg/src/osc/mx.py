"""Micro-scaling element codecs (FP4 E2M1, FP8 E4M3) with E8M0 group scales.

Encodings follow the OCP MX convention. Element codes are unsigned bytes
with the sign in the top bit of the element width (bit 3 for E2M1, bit 7
for E4M3). Scales are kept as signed exponents; an all-zero group carries
``ZERO_SCALE`` instead of an exponent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DecodeError, ShapeError, ValidationError
from .tensor import ActivationTensor, GroupSpec, PositionId, WeightMatrix, reshape_grouped

ZERO_SCALE = -128
MIN_EXPONENT = -127
MAX_EXPONENT = 127
E8M0_BIAS = 127
E8M0_ZERO_MARKER = 0xFF


def _e2m1_values() -> np.ndarray:
    return np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])


def _e4m3_values() -> np.ndarray:
    vals = []
    for code in range(127):  # 0x7F is NaN
        e, m = code >> 3, code & 7
        if e == 0:
            vals.append(m / 8.0 * 2.0**-6)
        else:
            vals.append((1.0 + m / 8.0) * 2.0 ** (e - 7))
    return np.array(vals)


class ElementFormat(enum.Enum):
    FP4_E2M1 = "fp4"
    FP8_E4M3 = "fp8"

    @classmethod
    def parse(cls, name) -> "ElementFormat":
        if isinstance(name, cls):
            return name
        aliases = {"fp4": cls.FP4_E2M1, "fp4_e2m1": cls.FP4_E2M1, "e2m1": cls.FP4_E2M1,
                   "fp8": cls.FP8_E4M3, "fp8_e4m3": cls.FP8_E4M3, "e4m3": cls.FP8_E4M3}
        try:
            return aliases[str(name).lower()]
        except KeyError:
            raise ValidationError(f"unknown element format {name!r}") from None

    @property
    def bits(self) -> int:
        return 4 if self is ElementFormat.FP4_E2M1 else 8

    @property
    def sign_bit(self) -> int:
        return 1 << (self.bits - 1)

    @property
    def positive_values(self) -> np.ndarray:
        """Magnitudes indexed by positive code, ascending."""
        return _POSITIVE_VALUES[self]

    @property
    def max_normal(self) -> float:
        return float(self.positive_values[-1])

    @property
    def element_emax(self) -> int:
        return 2 if self is ElementFormat.FP4_E2M1 else 8

    @property
    def file_code(self) -> int:
        return 0 if self is ElementFormat.FP4_E2M1 else 1

    @classmethod
    def from_file_code(cls, code: int) -> "ElementFormat":
        for fmt in cls:
            if fmt.file_code == code:
                return fmt
        raise ValidationError(f"unknown element format code {code}")

    def code_values(self) -> np.ndarray:
        """Value of every valid code, NaN for invalid bit patterns."""
        pos = self.positive_values
        n = 1 << self.bits
        out = np.full(n, np.nan)
        out[: len(pos)] = pos
        out[self.sign_bit : self.sign_bit + len(pos)] = -pos
        return out


_POSITIVE_VALUES = {
    ElementFormat.FP4_E2M1: _e2m1_values(),
    ElementFormat.FP8_E4M3: _e4m3_values(),
}
for _v in _POSITIVE_VALUES.values():
    _v.setflags(write=False)


def floor_log2(values: np.ndarray) -> np.ndarray:
    """Exact floor(log2 |v|) for nonzero finite values."""
    _, exp = np.frexp(np.abs(np.asarray(values, dtype=np.float64)))
    return exp.astype(np.int32) - 1


def compute_scales(groups: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    """Shared exponent for every group along the last axis."""
    amax = np.max(np.abs(np.asarray(groups, dtype=np.float64)), axis=-1)
    exps = np.clip(floor_log2(np.where(amax > 0, amax, 1.0)) - fmt.element_emax,
                   MIN_EXPONENT, MAX_EXPONENT)
    return np.where(amax > 0, exps, ZERO_SCALE).astype(np.int16)


def compute_scale(group_values, fmt: ElementFormat) -> int:
    """floor(log2(amax)) - emax, or ZERO_SCALE for an all-zero group."""
    return int(compute_scales(np.asarray(group_values, dtype=np.float64)[None, :], fmt)[0])


def scale_value(exponents) -> np.ndarray:
    exps = np.asarray(exponents, dtype=np.int32)
    return np.ldexp(1.0, np.where(exps == ZERO_SCALE, 0, exps))


def encode(scaled: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    """Round already-scaled values onto the code book (RNE, saturating)."""
    scaled = np.asarray(scaled, dtype=np.float64)
    vals = fmt.positive_values
    mag = np.abs(scaled)
    hi = np.minimum(np.searchsorted(vals, mag, side="left"), len(vals) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = mag - vals[lo]
    d_hi = vals[hi] - mag
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    code = np.where(take_hi, hi, lo).astype(np.uint8)
    negative = np.signbit(scaled) & (code != 0)
    return np.where(negative, code | fmt.sign_bit, code).astype(np.uint8)


def decode(codes, fmt: ElementFormat) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.max() >= (1 << fmt.bits) or codes.min() < 0):
        raise DecodeError(f"code out of range for {fmt.name}")
    out = fmt.code_values()[codes.astype(np.intp)]
    bad = np.isnan(out)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise DecodeError(
            f"invalid {fmt.name} bit pattern 0x{int(codes.ravel()[flat]):02x} at index {flat}"
        )
    return out


def quantize_groups(groups: np.ndarray, fmt: ElementFormat) -> tuple[np.ndarray, np.ndarray]:
    """Quantize along the last axis. Returns (codes, exponents)."""
    groups = np.asarray(groups, dtype=np.float64)
    exps = compute_scales(groups, fmt)
    codes = encode(groups / scale_value(exps)[..., None], fmt)
    return codes, exps


def dequantize_groups(codes: np.ndarray, exps: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    return decode(codes, fmt) * scale_value(exps)[..., None]


def quantize_group(group_values, fmt: ElementFormat) -> tuple[np.ndarray, int]:
    codes, exps = quantize_groups(np.asarray(group_values, dtype=np.float64)[None, :], fmt)
    return codes[0], int(exps[0])


def dequantize_group(codes, exponent: int, fmt: ElementFormat) -> np.ndarray:
    return dequantize_groups(np.asarray(codes)[None, :], np.array([exponent]), fmt)[0]


def pack_fp4(codes: np.ndarray) -> bytes:
    """Two codes per byte, even element in the low nibble."""
    flat = np.asarray(codes, dtype=np.uint8).ravel()
    if flat.size % 2:
        raise ShapeError("FP4 packing needs an even number of elements")
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_fp4(raw: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(raw, dtype=np.uint8)
    out = np.empty(count, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out


def exponents_to_e8m0(exps: np.ndarray) -> np.ndarray:
    exps = np.asarray(exps, dtype=np.int16)
    return np.where(exps == ZERO_SCALE, E8M0_ZERO_MARKER, exps + E8M0_BIAS).astype(np.uint8)


def e8m0_to_exponents(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int16)
    return np.where(raw == E8M0_ZERO_MARKER, ZERO_SCALE, raw - E8M0_BIAS).astype(np.int16)


@dataclass(frozen=True, eq=False)
class QuantizedBlockTensor:
    """Element codes (rows x channels, one code per byte in memory) and
    one exponent per (row, group)."""

    codes: np.ndarray
    scales: np.ndarray
    fmt: ElementFormat
    group_spec: GroupSpec
    position: Optional[PositionId] = None
    layer: Optional[int] = None

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        scales = np.ascontiguousarray(self.scales, dtype=np.int16)
        if codes.ndim != 2 or codes.shape[1] != self.group_spec.channels:
            raise ShapeError(f"codes shape {codes.shape} does not match {self.group_spec}")
        if scales.shape != (codes.shape[0], self.group_spec.group_count):
            raise ShapeError(f"scales shape {scales.shape} does not match codes {codes.shape}")
        valid = (scales == ZERO_SCALE) | ((scales >= MIN_EXPONENT) & (scales <= MAX_EXPONENT))
        if not valid.all():
            raise ValidationError("scale exponent outside [-127, 127]")
        codes.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scales", scales)

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    def dequantize(self) -> np.ndarray:
        g = self.group_spec
        grouped = reshape_grouped(self.codes, g)
        return dequantize_groups(grouped, self.scales, self.fmt).reshape(self.codes.shape)

    def packed_codes(self) -> bytes:
        if self.fmt is ElementFormat.FP4_E2M1:
            return pack_fp4(self.codes)
        return self.codes.tobytes()

    def __eq__(self, other):
        if not isinstance(other, QuantizedBlockTensor):
            return NotImplemented
        return (
            self.fmt is other.fmt
            and self.group_spec == other.group_spec
            and self.position == other.position
            and self.layer == other.layer
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
        )


def quantize_array(data: np.ndarray, g: GroupSpec, fmt: ElementFormat) -> tuple[np.ndarray, np.ndarray]:
    grouped = reshape_grouped(np.asarray(data), g)
    codes, exps = quantize_groups(grouped, fmt)
    return codes.reshape(data.shape), exps


def quantize_tensor(x, g: GroupSpec, fmt: ElementFormat) -> QuantizedBlockTensor:
    """Row-wise micro-scaling quantization of an activation tensor.

    Weight matrices are grouped along their input-channel axis, so the
    result is laid out as out_channels x in_channels.
    """
    fmt = ElementFormat.parse(fmt)
    if isinstance(x, WeightMatrix):
        data = x.data.T
    else:
        data = x.data if isinstance(x, ActivationTensor) else np.asarray(x, dtype=np.float32)
    codes, exps = quantize_array(data, g, fmt)
    return QuantizedBlockTensor(codes, exps, fmt, g,
                                getattr(x, "position", None), getattr(x, "layer", None))
