"""Static outlier suppression, dual-path GEMM and the comparison baselines.

Path A multiplies the dequantized low-bit activations (with protected
elements zeroed) by the dequantized low-bit weights. Path B multiplies the
extracted high-precision outliers (S x K) by the matching weight rows
(K x N). Both paths accumulate in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ShapeError, ValidationError
from .mx import ElementFormat, QuantizedBlockTensor, quantize_array, quantize_tensor
from .tensor import ActivationTensor, GroupSpec, PositionId, WeightMatrix, reshape_grouped

NO_SUPPRESSION = -1


@dataclass(frozen=True, eq=False)
class OutlierBuffer:
    values: np.ndarray  # S x K, zero where nothing was extracted
    indices: np.ndarray  # K local channel indices, -1 = none

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32)
        indices = np.array(self.indices, dtype=np.int16)
        if values.ndim != 2 or values.shape[1] != indices.shape[0]:
            raise ShapeError(f"buffer {values.shape} does not match {indices.shape[0]} indices")
        values.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "indices", indices)


@dataclass(frozen=True, eq=False)
class GatheredWeights:
    matrix: np.ndarray  # K x N
    rows: np.ndarray  # flat source row per group, -1 = zero row


def _check_indices(indices, g: GroupSpec) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (g.group_count,):
        raise ShapeError(f"expected {g.group_count} suppression indices, got {idx.shape}")
    bad = (idx < NO_SUPPRESSION) | (idx >= g.group_size)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"suppression index {int(idx[k])} for group {k} outside [-1, {g.group_size})")
    return idx


def _activation_data(x) -> np.ndarray:
    return x.data if isinstance(x, ActivationTensor) else np.asarray(x, dtype=np.float32)


def osc_quantize(x, indices, g: GroupSpec, fmt) -> tuple[QuantizedBlockTensor, OutlierBuffer]:
    """Extract the tabled channel of every group, zero it, then quantize.

    ``x`` is never modified; zeroing happens on a working copy.
    """
    fmt = ElementFormat.parse(fmt)
    data = _activation_data(x)
    idx = _check_indices(indices, g)
    work = reshape_grouped(data, g).copy()
    active = np.flatnonzero(idx >= 0)
    buf = np.zeros((data.shape[0], g.group_count), dtype=np.float32)
    buf[:, active] = work[:, active, idx[active]]
    work[:, active, idx[active]] = 0.0
    codes, exps = quantize_array(work.reshape(data.shape), g, fmt)
    q = QuantizedBlockTensor(codes, exps, fmt, g,
                             getattr(x, "position", None), getattr(x, "layer", None))
    return q, OutlierBuffer(buf, idx)


def gather_weight_rows(w: WeightMatrix, indices, g: GroupSpec) -> GatheredWeights:
    if w.in_channels != g.channels:
        raise ShapeError(f"weight has {w.in_channels} input channels, expected {g.channels}")
    idx = _check_indices(indices, g)
    rows = np.where(idx >= 0, np.arange(g.group_count) * g.group_size + idx, -1)
    out = np.zeros((g.group_count, w.out_channels), dtype=np.float32)
    active = rows >= 0
    out[active] = w.data[rows[active]]
    return GatheredWeights(out, rows)


def quantize_weight(w: WeightMatrix, g: GroupSpec, fmt) -> QuantizedBlockTensor:
    """Plain micro-scaling along the input-channel axis (stored N x H)."""
    if w.in_channels != g.channels:
        raise ShapeError(f"weight has {w.in_channels} input channels, expected {g.channels}")
    return quantize_tensor(w, g, fmt)


def bypass_product(values: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum over groups of values[:, k] (x) rows[k], accumulated sequentially in k.

    ``rows`` is K x N (shared by all tokens) or S x K x N (token-dependent).
    """
    values = np.asarray(values, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    out = np.zeros((values.shape[0], rows.shape[-1]), dtype=np.float64)
    for k in range(values.shape[1]):
        r = rows[k][None, :] if rows.ndim == 2 else rows[:, k, :]
        out += values[:, k, None] * r
    return out


def base_product(qx: QuantizedBlockTensor, wq: QuantizedBlockTensor) -> np.ndarray:
    if qx.group_spec != wq.group_spec:
        raise ValidationError(f"group specs differ: {qx.group_spec} vs {wq.group_spec}")
    return qx.dequantize() @ wq.dequantize().T


def dual_path_gemm(qx: QuantizedBlockTensor, buf: OutlierBuffer,
                   wq: QuantizedBlockTensor, wl: GatheredWeights) -> np.ndarray:
    if buf.values.shape != (qx.rows, qx.group_spec.group_count):
        raise ShapeError(f"buffer {buf.values.shape} does not pair with base tensor {qx.codes.shape}")
    if wl.matrix.shape != (qx.group_spec.group_count, wq.rows):
        raise ShapeError(f"gathered weights {wl.matrix.shape} do not match output width {wq.rows}")
    if not np.array_equal(np.where(buf.indices >= 0, 1, 0), np.where(wl.rows >= 0, 1, 0)):
        raise ValidationError("outlier buffer and gathered weights use different tables")
    return base_product(qx, wq) + bypass_product(buf.values, wl.matrix)


def reference_gemm(x, w: WeightMatrix) -> np.ndarray:
    return _activation_data(x).astype(np.float64) @ w.data.astype(np.float64)


def direct_quant_gemm(x, w: WeightMatrix, g: GroupSpec, fmt) -> np.ndarray:
    """Both operands quantized without any suppression."""
    data = _activation_data(x)
    if data.shape[1] != w.in_channels:
        raise ShapeError(f"activation width {data.shape[1]} != weight rows {w.in_channels}")
    qx = quantize_tensor(x, g, fmt)
    return base_product(qx, quantize_weight(w, g, fmt))


def dynamic_quantize(x, g: GroupSpec, fmt) -> tuple[QuantizedBlockTensor, np.ndarray, np.ndarray]:
    """Per token and group, pull the runtime argmax element into a bypass.

    Returns (base tensor, S x K extracted values, S x K local indices).
    """
    fmt = ElementFormat.parse(fmt)
    data = _activation_data(x)
    work = reshape_grouped(data, g).copy()
    jstar = np.argmax(np.abs(work), axis=-1)
    vals = np.take_along_axis(work, jstar[..., None], axis=-1)[..., 0].astype(np.float32)
    np.put_along_axis(work, jstar[..., None], 0.0, axis=-1)
    codes, exps = quantize_array(work.reshape(data.shape), g, fmt)
    q = QuantizedBlockTensor(codes, exps, fmt, g,
                             getattr(x, "position", None), getattr(x, "layer", None))
    return q, vals, jstar


def dynamic_quant_gemm(x, w: WeightMatrix, g: GroupSpec, fmt) -> np.ndarray:
    data = _activation_data(x)
    if data.shape[1] != w.in_channels:
        raise ShapeError(f"activation width {data.shape[1]} != weight rows {w.in_channels}")
    qx, vals, jstar = dynamic_quantize(x, g, fmt)
    flat_rows = np.arange(g.group_count)[None, :] * g.group_size + jstar
    return base_product(qx, quantize_weight(w, g, fmt)) + bypass_product(vals, w.data[flat_rows])


def osc_gemm(x, w: WeightMatrix, indices, g: GroupSpec, fmt) -> np.ndarray:
    qx, buf = osc_quantize(x, indices, g, fmt)
    return dual_path_gemm(qx, buf, quantize_weight(w, g, fmt), gather_weight_rows(w, indices, g))


def relative_error(y: np.ndarray, ref: np.ndarray) -> float:
    """Frobenius norm of (y - ref) over that of ref."""
    denom = np.linalg.norm(ref)
    if denom == 0:
        return 0.0 if not np.any(y) else float("inf")
    return float(np.linalg.norm(y - ref) / denom)


class Treatment(str, enum.Enum):
    OSC_FP4 = "osc_fp4"
    DIRECT_FP4 = "direct_fp4"
    FP8_FALLBACK = "fp8_fallback"
    FULL_PRECISION = "full_precision"
    DYNAMIC_FP4 = "dynamic_fp4"


@dataclass(frozen=True)
class PrecisionPolicy:
    treatments: Mapping[PositionId, Treatment]

    def __post_init__(self):
        missing = [p.value for p in PositionId if p not in self.treatments]
        if missing:
            raise ValidationError(f"policy has no treatment for {', '.join(missing)}")

    def __getitem__(self, p: PositionId) -> Treatment:
        return self.treatments[p]

    @classmethod
    def uniform(cls, t: Treatment, **overrides: Treatment) -> "PrecisionPolicy":
        m = {p: t for p in PositionId}
        m.update({PositionId(k): v for k, v in overrides.items()})
        return cls(m)

    @classmethod
    def default(cls) -> "PrecisionPolicy":
        """OSC on attention/Wo/W1W3 inputs, FP8 fallback on W2 inputs."""
        return cls.uniform(Treatment.OSC_FP4, w2_in=Treatment.FP8_FALLBACK)


# Named configurations of the ablation: name -> policy factory.
NAMED_POLICIES = {
    "default": PrecisionPolicy.default,
    "direct": lambda: PrecisionPolicy.uniform(Treatment.DIRECT_FP4),
    "w2fp8": lambda: PrecisionPolicy.uniform(Treatment.DIRECT_FP4, w2_in=Treatment.FP8_FALLBACK),
    "dynamic": lambda: PrecisionPolicy.uniform(Treatment.DYNAMIC_FP4),
    "w2fp8dyn": lambda: PrecisionPolicy.uniform(Treatment.DYNAMIC_FP4, w2_in=Treatment.FP8_FALLBACK),
    "osc": lambda: PrecisionPolicy.uniform(Treatment.OSC_FP4),
    "full": lambda: PrecisionPolicy.uniform(Treatment.FULL_PRECISION),
}


def named_policy(name: str) -> PrecisionPolicy:
    try:
        return NAMED_POLICIES[name]()
    except KeyError:
        raise ValidationError(
            f"unknown policy {name!r} (expected one of {', '.join(NAMED_POLICIES)})"
        ) from None


@dataclass(frozen=True)
class CellResult:
    position: PositionId
    layer: int
    treatment: Treatment
    output: np.ndarray
    rel_error: float


def run_treatment(t: Treatment, x: ActivationTensor, w: WeightMatrix, g: GroupSpec,
                  indices=None) -> np.ndarray:
    if t is Treatment.FULL_PRECISION:
        return reference_gemm(x, w)
    if t is Treatment.DIRECT_FP4:
        return direct_quant_gemm(x, w, g, ElementFormat.FP4_E2M1)
    if t is Treatment.FP8_FALLBACK:
        return direct_quant_gemm(x, w, g, ElementFormat.FP8_E4M3)
    if t is Treatment.DYNAMIC_FP4:
        return dynamic_quant_gemm(x, w, g, ElementFormat.FP4_E2M1)
    if indices is None:
        raise ValidationError(f"no suppression table slice for {x.position}, layer {x.layer}")
    return osc_gemm(x, w, indices, g, ElementFormat.FP4_E2M1)


def apply_policy(
    inputs: Mapping[tuple[PositionId, int], tuple[ActivationTensor, WeightMatrix]],
    policy: PrecisionPolicy,
    table=None,
    group_size: int = 32,
) -> list[CellResult]:
    """Route every (position, layer) cell through its treatment and score it
    against the full-precision GEMM."""
    results = []
    for (p, layer), (x, w) in sorted(inputs.items(), key=lambda kv: (list(PositionId).index(kv[0][0]), kv[0][1])):
        t = policy[p]
        g = GroupSpec.for_channels(x.channels, group_size)
        indices = None
        if t is Treatment.OSC_FP4:
            if table is None or p not in table.positions:
                raise ValidationError(f"no suppression table slice for {p}, layer {layer}")
            if table.group_size != group_size:
                raise ValidationError(f"table group size {table.group_size} != {group_size}")
            indices = table.slice(p, layer)
        y = run_treatment(t, x, w, g, indices)
        results.append(CellResult(p, layer, t, y, relative_error(y, reference_gemm(x, w))))
    return results


def mean_error(results: list[CellResult]) -> float:
    return float(np.mean([r.rel_error for r in results])) if results else 0.0
