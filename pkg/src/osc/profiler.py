"""Outlier profiling: layer-wise thresholds and clustering density.

A token is *outlier-afflicted* in group k when the largest magnitude in
that group strictly exceeds the layer threshold. The clustering density of
the group is the share of afflicted tokens whose group maximum sits on the
single most frequent channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ValidationError
from .tensor import ActivationTensor, GroupSpec, PositionId, reshape_grouped

HIGH_TIER_CUTOFF = 0.60
LOW_TIER_CUTOFF = 0.35


@dataclass(frozen=True)
class ThresholdConfig:
    alpha: float = 5.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class GroupDensityRecord:
    group: int
    n_total: int
    n_hit: int
    dominant_index: int  # -1 when no token is afflicted
    density: Optional[float]

    @property
    def defined(self) -> bool:
        return self.n_total > 0


@dataclass(frozen=True)
class ClusteringReport:
    position: Optional[PositionId]
    layer: Optional[int]
    group_spec: GroupSpec
    threshold: float
    records: tuple[GroupDensityRecord, ...] = field(repr=False)
    mean_density: Optional[float]
    tier: Optional[str]

    @property
    def has_outliers(self) -> bool:
        return self.mean_density is not None

    @property
    def dominant_indices(self) -> np.ndarray:
        return np.array([r.dominant_index for r in self.records], dtype=np.int16)


def classify_tier(mean_density: Optional[float]) -> Optional[str]:
    if mean_density is None:
        return None
    if mean_density > HIGH_TIER_CUTOFF:
        return "high"
    if mean_density < LOW_TIER_CUTOFF:
        return "low"
    return "moderate"


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, ActivationTensor) else np.asarray(x, dtype=np.float32)


def compute_threshold(x, cfg: ThresholdConfig = ThresholdConfig()) -> float:
    """alpha times the mean absolute activation over all S*H entries."""
    data = _data(x)
    if data.size == 0:
        raise ValidationError("cannot compute a threshold for an empty tensor")
    # exactly rounded sum, so token order never perturbs T
    return float(cfg.alpha * (math.fsum(np.abs(data, dtype=np.float64).ravel()) / data.size))


def outlier_mask(x, threshold: float) -> np.ndarray:
    if threshold < 0:
        raise ValidationError(f"threshold must be non-negative, got {threshold}")
    return np.abs(_data(x)) > threshold


def group_argmax(x, g: GroupSpec) -> np.ndarray:
    """S x K local index of the largest magnitude in each group (lowest on ties)."""
    return np.argmax(np.abs(reshape_grouped(_data(x), g)), axis=-1)


def afflicted_tokens(x, g: GroupSpec, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (j*, afflicted) both S x K."""
    mags = np.abs(reshape_grouped(_data(x), g))
    jstar = np.argmax(mags, axis=-1)
    peak = np.take_along_axis(mags, jstar[..., None], axis=-1)[..., 0]
    return jstar, peak > threshold


def dominant_channels(jstar: np.ndarray, afflicted: np.ndarray, group_size: int):
    """Per-group (n_total, n_hit, mode) over afflicted tokens; mode -1 when empty."""
    k = jstar.shape[1]
    counts = np.zeros((k, group_size), dtype=np.int64)
    cols = np.broadcast_to(np.arange(k), jstar.shape)
    np.add.at(counts, (cols[afflicted], jstar[afflicted]), 1)
    n_total = counts.sum(axis=1)
    mode = np.argmax(counts, axis=1)
    n_hit = counts[np.arange(k), mode]
    mode = np.where(n_total > 0, mode, -1)
    return n_total, n_hit, mode


def clustering_density(x, g: GroupSpec, threshold: float) -> ClusteringReport:
    jstar, afflicted = afflicted_tokens(x, g, threshold)
    n_total, n_hit, mode = dominant_channels(jstar, afflicted, g.group_size)
    records = []
    for k in range(g.group_count):
        total = int(n_total[k])
        density = int(n_hit[k]) / total if total else None
        records.append(GroupDensityRecord(k, total, int(n_hit[k]), int(mode[k]), density))
    defined = [r.density for r in records if r.density is not None]
    mean = math.fsum(defined) / len(defined) if defined else None
    return ClusteringReport(
        getattr(x, "position", None),
        getattr(x, "layer", None),
        g,
        float(threshold),
        tuple(records),
        mean,
        classify_tier(mean),
    )


def profile_tensor(x, group_size: int, cfg: ThresholdConfig = ThresholdConfig()) -> ClusteringReport:
    g = GroupSpec.for_channels(_data(x).shape[1], group_size)
    return clustering_density(x, g, compute_threshold(x, cfg))


def profile_sweep(
    tensors: Iterable[ActivationTensor], group_size: int, cfg: ThresholdConfig = ThresholdConfig()
) -> list[ClusteringReport]:
    """One report per (position, layer); each layer gets its own threshold."""
    reports = []
    seen = set()
    for x in tensors:
        key = x.key
        if key in seen:
            raise ValidationError(f"duplicate tensor for position {key[0]}, layer {key[1]}")
        seen.add(key)
        reports.append(profile_tensor(x, group_size, cfg))
    return reports
