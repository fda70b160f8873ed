"""Analytic roofline model of the dual-path GEMM against W8A8 and W16A16.

Cycles for a scheme are max(compute cycles, memory cycles). Compute cycles
are MACs divided by the per-format MAC rate; the OSC bypass adds one
high-precision MAC per group of G reduction elements. Memory cycles count
activation, weight, bypass and output bytes (fp16 output) over bandwidth.
The suppression table itself is assumed cache-resident and costs nothing.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, replace
from itertools import product
from typing import Iterable, Sequence

from .errors import ValidationError

CLASSIC_DIMS = (512, 768, 2048, 4096, 12288)


class Scheme(str, enum.Enum):
    W16A16 = "w16a16"
    W8A8 = "w8a8"
    OSC_W4A4 = "osc_w4a4"


@dataclass(frozen=True)
class HardwareProfile:
    """Per-cycle MAC rates and memory bandwidth.

    Only ratios matter: scaling every rate and the bandwidth by the same
    factor leaves all speedups unchanged.
    """

    fp16_rate: float = 4096.0
    fp8_rate: float = 8192.0
    fp4_rate: float = 16384.0
    bandwidth: float = 256.0  # bytes / cycle
    fp16_bytes: float = 2.0
    fp8_bytes: float = 1.0
    fp4_bytes: float = 0.5
    scale_bytes: float = 1.0  # one E8M0 byte per group

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValidationError(f"hardware field {name} must be positive, got {value}")

    @classmethod
    def from_json(cls, text: str) -> "HardwareProfile":
        doc = json.loads(text)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown hardware fields: {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in doc.items()})

    def scaled(self, c: float) -> "HardwareProfile":
        return replace(self, fp16_rate=self.fp16_rate * c, fp8_rate=self.fp8_rate * c,
                       fp4_rate=self.fp4_rate * c, bandwidth=self.bandwidth * c)


@dataclass(frozen=True)
class WorkloadSpec:
    m: int
    kdim: int
    n: int
    scheme: Scheme
    group_size: int = 32

    def __post_init__(self):
        if min(self.m, self.kdim, self.n) < 1:
            raise ValidationError("GEMM dims must be positive")
        if self.scheme is Scheme.OSC_W4A4 and self.kdim % self.group_size:
            raise ValidationError(f"reduction dim {self.kdim} not a multiple of G={self.group_size}")


@dataclass(frozen=True)
class CycleEstimate:
    compute: float
    memory: float
    path_a: float = 0.0
    path_b: float = 0.0

    @property
    def cycles(self) -> float:
        return max(self.compute, self.memory)

    @property
    def regime(self) -> str:
        return "compute" if self.compute >= self.memory else "memory"

    @property
    def overhead(self) -> float:
        """Bypass compute cycles as a fraction of base compute cycles."""
        return self.path_b / self.path_a if self.path_a else 0.0


def compute_cycles(w: WorkloadSpec, hw: HardwareProfile = HardwareProfile()) -> CycleEstimate:
    m, k, n = w.m, w.kdim, w.n
    macs = m * k * n
    out_bytes = m * n * hw.fp16_bytes
    if w.scheme is Scheme.W16A16:
        compute = macs / hw.fp16_rate
        traffic = (m * k + k * n) * hw.fp16_bytes + out_bytes
        return CycleEstimate(compute, traffic / hw.bandwidth)
    if w.scheme is Scheme.W8A8:
        compute = macs / hw.fp8_rate
        traffic = (m * k + k * n) * hw.fp8_bytes + out_bytes
        return CycleEstimate(compute, traffic / hw.bandwidth)
    groups = k // w.group_size
    path_a = macs / hw.fp4_rate
    path_b = m * groups * n / hw.fp16_rate
    per_elem = hw.fp4_bytes + hw.scale_bytes / w.group_size
    traffic = (
        (m * k + k * n) * per_elem
        + (m * groups + groups * n) * hw.fp16_bytes
        + out_bytes
    )
    return CycleEstimate(path_a + path_b, traffic / hw.bandwidth, path_a, path_b)


def speedup(baseline: WorkloadSpec, candidate: WorkloadSpec,
            hw: HardwareProfile = HardwareProfile()) -> float:
    if (baseline.m, baseline.kdim, baseline.n) != (candidate.m, candidate.kdim, candidate.n):
        raise ValidationError("speedup needs identical GEMM dims")
    return compute_cycles(baseline, hw).cycles / compute_cycles(candidate, hw).cycles


def compute_bound_speedup(group_size: int, hw: HardwareProfile = HardwareProfile()) -> float:
    """Closed form: (1/fp8) / (1/fp4 + 1/(G*fp16)); 2/(1+4/G) at 1:2:4."""
    return (1 / hw.fp8_rate) / (1 / hw.fp4_rate + 1 / (group_size * hw.fp16_rate))


@dataclass(frozen=True)
class SweepCell:
    m: int
    kdim: int
    n: int
    group_size: int
    w8a8_cycles: float
    osc_cycles: float
    w8a8_regime: str
    osc_regime: str
    speedup: float
    overhead: float


def sweep_table(
    ms: Sequence[int],
    group_sizes: Sequence[int],
    dims: Iterable[int] = CLASSIC_DIMS,
    hw: HardwareProfile = HardwareProfile(),
) -> list[SweepCell]:
    dims = list(dims)
    cells = []
    for g, m, k, n in product(group_sizes, ms, dims, dims):
        base = compute_cycles(WorkloadSpec(m, k, n, Scheme.W8A8, g), hw)
        osc = compute_cycles(WorkloadSpec(m, k, n, Scheme.OSC_W4A4, g), hw)
        cells.append(SweepCell(m, k, n, g, base.cycles, osc.cycles, base.regime, osc.regime,
                               base.cycles / osc.cycles, osc.overhead))
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["M", "K", "N", "G", "w8a8_cycles", "osc_cycles", "w8a8_regime",
                     "osc_regime", "speedup", "path_b_overhead"])
    for c in cells:
        writer.writerow([c.m, c.kdim, c.n, c.group_size, f"{c.w8a8_cycles:.6g}",
                         f"{c.osc_cycles:.6g}", c.w8a8_regime, c.osc_regime,
                         f"{c.speedup:.6f}", f"{c.overhead:.6f}"])
    return buf.getvalue()


def summarize(cells: Sequence[SweepCell], split_m: int = 128) -> list[dict]:
    """Per-G speedup ranges below and at/above ``split_m``."""
    rows = []
    for g in sorted({c.group_size for c in cells}):
        small = [c.speedup for c in cells if c.group_size == g and c.m < split_m]
        large = [c.speedup for c in cells if c.group_size == g and c.m >= split_m]
        rows.append({
            "G": g,
            "small_m": (min(small), max(small)) if small else None,
            "large_m": (min(large), max(large)) if large else None,
            "large_m_compute_bound": all(
                c.osc_regime == "compute" and c.w8a8_regime == "compute"
                for c in cells if c.group_size == g and c.m >= split_m
            ),
        })
    return rows
