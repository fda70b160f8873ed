"""Profile CSVs, PGM mask/heatmap images and the density-by-layer summary.

Heatmap pixels map each |x| to floor(255 * F(|x|)) where F is the empirical
CDF of |x| over the whole tensor (share of entries <= the value). The map
is monotone nondecreasing in magnitude and the largest entry is always 255.
Mask images use maxval 1, so each pixel byte is exactly the mask bit.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .fileio import atomic_write
from .profiler import ClusteringReport, classify_tier, outlier_mask
from .tensor import PositionId

PROFILE_COLUMNS = ["position", "layer", "group_size", "group", "n_total", "n_hit",
                   "dominant_index", "density", "tier"]
SUMMARY_GROUP = "mean"


def encode_pgm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValidationError("PGM images are two-dimensional")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValidationError(f"pixel values outside [0, {maxval}]")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def decode_pgm(raw: bytes) -> tuple[np.ndarray, int]:
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM (P5) image")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    body = parts[3]
    if len(body) != w * h:
        raise FormatError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w), maxval


def write_pgm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    atomic_write(path, encode_pgm(pixels, maxval))


def mask_image(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask, dtype=np.uint8)


def heatmap_image(data: np.ndarray) -> np.ndarray:
    mags = np.abs(np.asarray(data, dtype=np.float64))
    if mags.size == 0:
        return np.zeros(mags.shape, dtype=np.uint8)
    ranks = np.searchsorted(np.sort(mags, axis=None), mags, side="right")
    return np.floor(255.0 * ranks / mags.size).astype(np.uint8)


def emit_images(x, threshold: float, out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    mask_path = out_dir / f"{stem}.mask.pgm"
    heat_path = out_dir / f"{stem}.heat.pgm"
    write_pgm(mask_path, mask_image(outlier_mask(x, threshold)), maxval=1)
    write_pgm(heat_path, heatmap_image(x.data))
    return mask_path, heat_path


def cell_stem(position, layer) -> str:
    return f"{position}.L{layer}"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def profile_csv(reports: Iterable[ClusteringReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PROFILE_COLUMNS)
    for rep in reports:
        pos, layer, g = _fmt(rep.position), _fmt(rep.layer), rep.group_spec.group_size
        for r in rep.records:
            writer.writerow([pos, layer, g, r.group, r.n_total, r.n_hit, r.dominant_index,
                             _fmt(r.density), ""])
        writer.writerow([pos, layer, g, SUMMARY_GROUP,
                         sum(r.n_total for r in rep.records),
                         sum(r.n_hit for r in rep.records), "",
                         _fmt(rep.mean_density), rep.tier or "none"])
    return buf.getvalue()


def read_profile_summaries(text: str) -> list[dict]:
    """Summary rows of a profile CSV as dicts with parsed fields."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if header != PROFILE_COLUMNS:
        raise ValidationError(f"unexpected profile CSV header {header}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(PROFILE_COLUMNS):
            raise ValidationError(f"line {lineno}: expected {len(PROFILE_COLUMNS)} fields, got {len(row)}")
        rec = dict(zip(PROFILE_COLUMNS, row))
        try:
            if rec["position"]:
                PositionId.parse(rec["position"])
            int(rec["group_size"])
            int(rec["n_total"]), int(rec["n_hit"])
            density = float(rec["density"]) if rec["density"] else None
        except (ValueError, ValidationError) as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        if density is not None and not 0.0 <= density <= 1.0:
            raise ValidationError(f"line {lineno}: density {density} outside [0, 1]")
        if rec["group"] != SUMMARY_GROUP:
            continue
        out.append({
            "position": rec["position"],
            "layer": int(rec["layer"]) if rec["layer"] else None,
            "group_size": int(rec["group_size"]),
            "mean_density": density,
            "tier": classify_tier(density),
        })
    return out


def density_by_layer_csv(summaries: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["position", "group_size", "layer", "mean_density", "tier"])
    order = {p.value: i for i, p in enumerate(PositionId)}
    for s in sorted(summaries, key=lambda s: (order.get(s["position"], 99), s["group_size"],
                                              s["layer"] if s["layer"] is not None else -1)):
        writer.writerow([s["position"], s["group_size"], _fmt(s["layer"]),
                         _fmt(s["mean_density"]), s["tier"] or "none"])
    return buf.getvalue()


def summary_markdown(summaries: Sequence[dict]) -> str:
    if not summaries:
        return "# Outlier clustering summary\n\nNo profile rows.\n"
    lines = ["# Outlier clustering summary", "",
             "| position | G | layers | mean density | min | max | tiers |",
             "|---|---|---|---|---|---|---|"]
    cells = defaultdict(list)
    for s in summaries:
        cells[(s["position"], s["group_size"])].append(s)
    order = {p.value: i for i, p in enumerate(PositionId)}
    for (pos, g), rows in sorted(cells.items(), key=lambda kv: (order.get(kv[0][0], 99), kv[0][1])):
        ds = [r["mean_density"] for r in rows if r["mean_density"] is not None]
        tiers = sorted({r["tier"] or "none" for r in rows})
        if ds:
            stats = f"{np.mean(ds):.3f} | {min(ds):.3f} | {max(ds):.3f}"
        else:
            stats = "- | - | -"
        lines.append(f"| {pos} | {g} | {len(rows)} | {stats} | {', '.join(tiers)} |")
    return "\n".join(lines) + "\n"
