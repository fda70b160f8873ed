"""Offline construction and serialization of the static suppression table.

For every (position, layer, group) the table stores the local channel that
most often holds the group maximum among outlier-afflicted calibration
tokens, or -1 when no calibration token ever exceeded the layer threshold.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .fileio import atomic_write
from .profiler import ThresholdConfig, afflicted_tokens, compute_threshold, dominant_channels
from .tensor import ActivationTensor, GroupSpec, PositionId

TABLE_VERSION = 1
NO_SUPPRESSION = -1


class CalibrationSet:
    """Calibration sequences grouped by (position, layer)."""

    def __init__(self, tensors: Iterable[ActivationTensor] = ()):
        self._cells: dict[tuple[PositionId, int], list[ActivationTensor]] = {}
        for x in tensors:
            self.add(x)

    def add(self, x: ActivationTensor) -> None:
        self._cells.setdefault(x.key, []).append(x)

    def keys(self) -> list[tuple[PositionId, int]]:
        order = list(PositionId)
        return sorted(self._cells, key=lambda k: (order.index(k[0]), k[1]))

    def sequences(self, key) -> list[ActivationTensor]:
        return list(self._cells[key])

    def token_count(self, key=None) -> int:
        keys = [key] if key is not None else self.keys()
        return sum(x.tokens for k in keys for x in self._cells[k])

    def concatenated(self, key) -> ActivationTensor:
        seqs = self._cells[key]
        widths = {x.channels for x in seqs}
        if len(widths) != 1:
            raise ShapeError(f"inconsistent hidden dims {sorted(widths)} for {key[0]}, layer {key[1]}")
        return ActivationTensor(np.concatenate([x.data for x in seqs]), key[0], key[1])

    def hidden_dims(self) -> dict[PositionId, int]:
        dims: dict[PositionId, set] = {}
        for (p, _), seqs in self._cells.items():
            dims.setdefault(p, set()).update(x.channels for x in seqs)
        out = {}
        for p, ws in dims.items():
            if len(ws) != 1:
                raise ShapeError(f"inconsistent hidden dims {sorted(ws)} at position {p}")
            out[p] = ws.pop()
        return out

    def __len__(self) -> int:
        return len(self._cells)


@dataclass
class PositionTable:
    hidden_dim: int
    layers: list[np.ndarray]  # indexed by layer number, each of length K_p


@dataclass
class SuppressionTable:
    group_size: int
    alpha: float
    positions: dict[PositionId, PositionTable]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for p, entry in self.positions.items():
            if entry.hidden_dim % self.group_size:
                raise ValidationError(
                    f"hidden dim {entry.hidden_dim} at {p} is not a multiple of {self.group_size}"
                )
            k = entry.hidden_dim // self.group_size
            for layer, idx in enumerate(entry.layers):
                idx = np.asarray(idx)
                if idx.shape != (k,):
                    raise ValidationError(
                        f"{p} layer {layer}: expected {k} entries, got shape {idx.shape}"
                    )
                bad = (idx < NO_SUPPRESSION) | (idx >= self.group_size)
                if bad.any():
                    j = int(np.flatnonzero(bad)[0])
                    raise ValidationError(
                        f"{p} layer {layer} group {j}: entry {int(idx[j])} outside [-1, {self.group_size})"
                    )

    def group_spec(self, position) -> GroupSpec:
        entry = self.positions[PositionId.parse(str(position))]
        return GroupSpec.for_channels(entry.hidden_dim, self.group_size)

    def slice(self, position, layer: int) -> np.ndarray:
        """Suppression vector for one (position, layer); all -1 for unprofiled layers."""
        p = PositionId.parse(str(position))
        if p not in self.positions:
            raise ValidationError(f"table has no entry for position {p}")
        entry = self.positions[p]
        if 0 <= layer < len(entry.layers):
            return np.array(entry.layers[layer], dtype=np.int16)
        return np.full(entry.hidden_dim // self.group_size, NO_SUPPRESSION, dtype=np.int16)

    def dense(self) -> np.ndarray:
        """P x L x K_max view padded with -1, positions in enumeration order."""
        ps = [p for p in PositionId if p in self.positions]
        n_layers = max((len(self.positions[p].layers) for p in ps), default=0)
        k_max = max((self.positions[p].hidden_dim // self.group_size for p in ps), default=0)
        out = np.full((len(ps), n_layers, k_max), NO_SUPPRESSION, dtype=np.int16)
        for i, p in enumerate(ps):
            for layer, idx in enumerate(self.positions[p].layers):
                out[i, layer, : len(idx)] = idx
        return out

    def packed(self) -> bytes:
        """One byte per entry of the dense view, 0xFF for -1."""
        return self.dense().astype(np.int8).astype(np.uint8).tobytes()

    def __eq__(self, other):
        if not isinstance(other, SuppressionTable):
            return NotImplemented
        return to_json(self) == to_json(other)

    def same_entries(self, other: "SuppressionTable") -> bool:
        return (
            self.group_size == other.group_size
            and set(self.positions) == set(other.positions)
            and all(
                self.positions[p].hidden_dim == other.positions[p].hidden_dim
                and len(self.positions[p].layers) == len(other.positions[p].layers)
                and all(np.array_equal(a, b) for a, b in zip(self.positions[p].layers,
                                                             other.positions[p].layers))
                for p in self.positions
            )
        )


def mode_or_none(candidates: np.ndarray, group_size: int) -> int:
    """Most frequent value, lowest on ties; -1 for an empty multiset."""
    if len(candidates) == 0:
        return NO_SUPPRESSION
    return int(np.argmax(np.bincount(candidates, minlength=group_size)))


def build_table(
    calib: CalibrationSet,
    group_size: int,
    cfg: ThresholdConfig = ThresholdConfig(),
    created: Optional[str] = None,
) -> SuppressionTable:
    if len(calib) == 0:
        raise ValidationError("calibration set is empty")
    hidden = calib.hidden_dims()
    layer_counts: dict[PositionId, int] = {}
    for p, layer in calib.keys():
        layer_counts[p] = max(layer_counts.get(p, 0), layer + 1)

    positions = {}
    thresholds: dict[str, list] = {}
    for p in [p for p in PositionId if p in hidden]:
        g = GroupSpec.for_channels(hidden[p], group_size)
        layers = [np.full(g.group_count, NO_SUPPRESSION, dtype=np.int16)
                  for _ in range(layer_counts[p])]
        ts: list = [None] * layer_counts[p]
        for key in [k for k in calib.keys() if k[0] == p]:
            x = calib.concatenated(key)
            t = compute_threshold(x, cfg)
            jstar, afflicted = afflicted_tokens(x, g, t)
            _, _, mode = dominant_channels(jstar, afflicted, group_size)
            layers[key[1]] = mode.astype(np.int16)
            ts[key[1]] = t
        positions[p] = PositionTable(hidden[p], layers)
        thresholds[p.value] = ts

    if created is None:
        created = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    provenance = {
        "calibration_tokens": calib.token_count(),
        "created": created,
        "thresholds": thresholds,
    }
    return SuppressionTable(group_size, float(cfg.alpha), positions, provenance)


def table_hit_rate(table: SuppressionTable, x: ActivationTensor, threshold: float) -> Optional[float]:
    """Share of afflicted tokens whose group maximum is the tabled channel.

    None when no token in ``x`` is afflicted.
    """
    p, layer = x.key
    g = table.group_spec(p)
    if x.channels != g.channels:
        raise ShapeError(f"tensor has {x.channels} channels, table expects {g.channels} at {p}")
    idx = table.slice(p, layer)
    jstar, afflicted = afflicted_tokens(x, g, threshold)
    total = int(afflicted.sum())
    if total == 0:
        return None
    hits = int((afflicted & (jstar == idx[None, :])).sum())
    return hits / total


def to_json(table: SuppressionTable) -> str:
    positions = []
    for p in [p for p in PositionId if p in table.positions]:
        entry = table.positions[p]
        positions.append({
            "name": p.value,
            "hidden_dim": entry.hidden_dim,
            "layers": [[int(v) for v in idx] for idx in entry.layers],
        })
    doc = {
        "version": TABLE_VERSION,
        "group_size": table.group_size,
        "alpha": table.alpha,
        "positions": positions,
        "provenance": table.provenance,
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n"


def from_json(text: str) -> SuppressionTable:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"table is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("table document must be a JSON object")
    if doc.get("version") != TABLE_VERSION:
        raise FormatError(f"table schema version {doc.get('version')!r}, expected {TABLE_VERSION}")
    try:
        positions = {}
        for item in doc["positions"]:
            p = PositionId.parse(item["name"])
            if p in positions:
                raise FormatError(f"position {p} listed twice")
            layers = [np.array(layer, dtype=np.int64) for layer in item["layers"]]
            positions[p] = PositionTable(int(item["hidden_dim"]), layers)
        table = SuppressionTable(int(doc["group_size"]), float(doc["alpha"]), positions,
                                 doc.get("provenance", {}))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed table document: {exc!r}") from None
    for entry in table.positions.values():
        entry.layers = [idx.astype(np.int16) for idx in entry.layers]
    return table


def save_table(table: SuppressionTable, path) -> None:
    atomic_write(path, to_json(table))


def load_table(path) -> SuppressionTable:
    return from_json(Path(path).read_text(encoding="utf-8"))
