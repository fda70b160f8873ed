"""Core tensor types and group partitioning.

Activations are token x channel matrices (batch already flattened into the
token axis). All data is held as row-major float32 and frozen after
construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonFiniteError, ShapeError, ValidationError

ALLOWED_GROUP_SIZES = (16, 32, 64)


class PositionId(str, enum.Enum):
    """GEMM input interfaces monitored inside a transformer block."""

    ATTENTION_IN = "attention_in"
    WO_IN = "wo_in"
    W1W3_IN = "w1w3_in"
    W2_IN = "w2_in"

    @classmethod
    def parse(cls, name: str) -> "PositionId":
        try:
            return cls(name.lower())
        except ValueError:
            valid = ", ".join(p.value for p in cls)
            raise ValidationError(f"unknown position {name!r} (expected one of {valid})") from None

    def __str__(self) -> str:
        return self.value


def _frozen_float32(data, ndim: int) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"expected a rank-{ndim} array, got shape {arr.shape}")
    bad = ~np.isfinite(arr)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteError(flat, float(arr.ravel()[flat]))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GroupSpec:
    group_size: int
    group_count: int

    def __post_init__(self):
        if self.group_size not in ALLOWED_GROUP_SIZES:
            raise ValidationError(
                f"group size must be one of {ALLOWED_GROUP_SIZES}, got {self.group_size}"
            )
        if self.group_count < 1:
            raise ValidationError(f"group count must be positive, got {self.group_count}")

    @classmethod
    def for_channels(cls, channels: int, group_size: int, pad_zero: bool = False) -> "GroupSpec":
        """Partition ``channels`` into groups; rejects a remainder unless ``pad_zero``."""
        if channels % group_size:
            if not pad_zero:
                raise ShapeError(f"{channels} channels is not a multiple of group size {group_size}")
            return cls(group_size, -(-channels // group_size))
        return cls(group_size, channels // group_size)

    @property
    def channels(self) -> int:
        return self.group_size * self.group_count


@dataclass(frozen=True, eq=False)
class ActivationTensor:
    data: np.ndarray
    position: Optional[PositionId] = None
    layer: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_float32(self.data, 2))
        if self.position is not None and not isinstance(self.position, PositionId):
            object.__setattr__(self, "position", PositionId.parse(self.position))
        if self.layer is not None:
            if int(self.layer) < 0:
                raise ValidationError(f"layer index must be non-negative, got {self.layer}")
            object.__setattr__(self, "layer", int(self.layer))

    @classmethod
    def from_batched(cls, data, position=None, layer=None) -> "ActivationTensor":
        """Flatten a B x S x H batch to (B*S) x H."""
        arr = np.asarray(data)
        if arr.ndim == 3:
            arr = arr.reshape(-1, arr.shape[-1])
        return cls(arr, position, layer)

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def key(self) -> tuple[PositionId, int]:
        if self.position is None or self.layer is None:
            raise ValidationError("tensor carries no (position, layer) tag")
        return (self.position, self.layer)

    def with_data(self, data) -> "ActivationTensor":
        return ActivationTensor(data, self.position, self.layer)

    def __eq__(self, other):
        if not isinstance(other, ActivationTensor):
            return NotImplemented
        return (
            self.position == other.position
            and self.layer == other.layer
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Row-major in_channels x out_channels weights (y = x @ W)."""

    data: np.ndarray
    position: Optional[PositionId] = None
    layer: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_float32(self.data, 2))
        if self.position is not None and not isinstance(self.position, PositionId):
            object.__setattr__(self, "position", PositionId.parse(self.position))
        if self.layer is not None:
            object.__setattr__(self, "layer", int(self.layer))

    @property
    def in_channels(self) -> int:
        return self.data.shape[0]

    @property
    def out_channels(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, WeightMatrix):
            return NotImplemented
        return (
            self.position == other.position
            and self.layer == other.layer
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def pad_channels(x: ActivationTensor, group_size: int) -> ActivationTensor:
    """Append zero channels so the channel count divides ``group_size``."""
    extra = -x.channels % group_size
    if not extra:
        return x
    return x.with_data(np.pad(x.data, ((0, 0), (0, extra))))


def reshape_grouped(x, g: GroupSpec) -> np.ndarray:
    """Read-only S x K x G view; element (s, k, j) is flat channel k*G + j."""
    data = x.data if isinstance(x, (ActivationTensor, WeightMatrix)) else np.asarray(x)
    if data.ndim != 2 or data.shape[1] != g.channels:
        raise ShapeError(
            f"cannot view {data.shape} as groups of {g.group_size} x {g.group_count}"
        )
    return data.reshape(data.shape[0], g.group_count, g.group_size)
