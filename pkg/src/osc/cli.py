"""``osc`` command-line entry point.

Every subcommand resolves its options from (lowest to highest priority)
built-in defaults, ``--config file.json`` and explicit flags, then writes
the resolved options next to its primary output so the run can be
repeated with ``--config``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import sys
from collections import defaultdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .errors import OSCError, ValidationError
from .fileio import (
    OQT_VERSION,
    OTF_VERSION,
    atomic_write,
    load_quantized,
    read_otf,
    save_quantized,
    save_tensor,
    tensor_from_otf,
    write_otf,
)
from .mx import ElementFormat
from .perf import CLASSIC_DIMS, HardwareProfile, summarize, sweep_csv, sweep_table
from .pipeline import (
    NAMED_POLICIES,
    OutlierBuffer,
    apply_policy,
    dual_path_gemm,
    gather_weight_rows,
    mean_error,
    named_policy,
    osc_quantize,
    quantize_weight,
    reference_gemm,
    relative_error,
    bypass_product,
)
from .profiler import ThresholdConfig, compute_threshold, profile_tensor
from .report import (
    cell_stem,
    density_by_layer_csv,
    emit_images,
    profile_csv,
    read_profile_summaries,
    summary_markdown,
)
from .synth import SynthSpec, generate_grid
from .table import TABLE_VERSION, CalibrationSet, build_table, load_table, save_table
from .tensor import ActivationTensor, GroupSpec, PositionId, WeightMatrix

EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 2, 3, 4
DEFAULT_POLICIES = "default,direct,w2fp8,dynamic"


class UsageError(Exception):
    pass


# name -> (defaults, required option names)
COMMANDS: dict[str, tuple[dict, tuple[str, ...]]] = {
    "profile": ({"in": None, "group_size": 32, "alpha": 5.0, "out": None, "emit_masks": None},
                ("in", "out")),
    "build-table": ({"calib": None, "group_size": 32, "alpha": 5.0, "out": None, "timestamp": None},
                    ("calib", "out")),
    "quantize": ({"in": None, "table": None, "group_size": 32, "fmt": "fp4", "out": None,
                  "outliers": None}, ("in", "table", "out", "outliers")),
    "matmul": ({"x": None, "outliers": None, "w": None, "table": None, "out": None,
                "report": None, "ref": None}, ("x", "outliers", "w", "table", "out")),
    "eval-error": ({"policy": DEFAULT_POLICIES, "in": None, "weights": None, "table": None,
                    "group_size": 32, "out": None}, ("in", "weights", "out")),
    "perf": ({"hw": "default", "M": "16,64,128", "G": "16,32,64", "dims": "classic", "out": None},
             ()),
    "synth": ({"S": 512, "H": 512, "N": 256, "G": 32, "persistence": None, "rate": 0.2,
               "mag": 20.0, "seed": 7, "positions": "all", "layers": 2, "sequences": 3,
               "eval_tokens": None, "out": None}, ("out",)),
    "report": ({"in": [], "tensors": None, "alpha": 5.0, "out": None}, ("out",)),
}


def _add(p: argparse.ArgumentParser, *flags, **kw):
    kw.setdefault("default", argparse.SUPPRESS)
    p.add_argument(*flags, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osc", description="Static outlier suppression lab")
    parser.add_argument("--version", action="store_true", help="print file-format schema versions")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    parser.subcommands = {}

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        parser.subcommands[name] = p
        _add(p, "--config", help="JSON file of option values (explicit flags win)")
        return p

    p = cmd("profile", "clustering density per (position, layer)")
    _add(p, "--in", dest="in", help="OTF1 file or directory of OTF1 files")
    _add(p, "--group-size", dest="group_size", type=int)
    _add(p, "--alpha", type=float)
    _add(p, "--out", help="report CSV")
    _add(p, "--emit-masks", dest="emit_masks", help="directory for mask/heatmap PGMs")

    p = cmd("build-table", "build the static suppression table from calibration tensors")
    _add(p, "--calib")
    _add(p, "--group-size", dest="group_size", type=int)
    _add(p, "--alpha", type=float)
    _add(p, "--out")
    _add(p, "--timestamp", help="provenance creation time (default: now, UTC)")

    p = cmd("quantize", "OSC-enhanced quantization of one activation tensor")
    _add(p, "--in", dest="in")
    _add(p, "--table")
    _add(p, "--group-size", dest="group_size", type=int)
    _add(p, "--fmt", choices=["fp4", "fp8"])
    _add(p, "--out", help="OQT1 base tensor")
    _add(p, "--outliers", help="OTF1 outlier buffer")

    p = cmd("matmul", "dual-path GEMM of a quantized base tensor and its outlier buffer")
    _add(p, "--x", help="OQT1 base tensor")
    _add(p, "--outliers")
    _add(p, "--w", help="OTF1 weight matrix (in_channels x out_channels)")
    _add(p, "--table")
    _add(p, "--out", help="OTF1 output")
    _add(p, "--report", help="CSV with output statistics")
    _add(p, "--ref", help="original activation tensor, enables the relative-error column")

    p = cmd("eval-error", "relative GEMM error per position under precision policies")
    _add(p, "--policy", help=f"comma list of {', '.join(NAMED_POLICIES)} or 'all'")
    _add(p, "--in", dest="in", help="directory of held-out activation tensors")
    _add(p, "--weights", help="directory of weight matrices")
    _add(p, "--table")
    _add(p, "--group-size", dest="group_size", type=int)
    _add(p, "--out")

    p = cmd("perf", "analytic speedup sweep over W8A8")
    _add(p, "--hw", help="'default' or a JSON hardware profile")
    _add(p, "--M", dest="M")
    _add(p, "--G", dest="G")
    _add(p, "--dims", help="'classic' or a comma list of K/N values")
    _add(p, "--out")

    p = cmd("synth", "synthetic calibration/eval/weight grid with planted outliers")
    _add(p, "--S", dest="S", type=int, help="tokens per sequence")
    _add(p, "--H", dest="H", type=int)
    _add(p, "--N", dest="N", type=int, help="weight output channels")
    _add(p, "--G", dest="G", type=int)
    _add(p, "--persistence", type=float, help="override per-position defaults (0.7, W2 0.3)")
    _add(p, "--rate", type=float)
    _add(p, "--mag", type=float)
    _add(p, "--seed", type=int)
    _add(p, "--positions")
    _add(p, "--layers", type=int)
    _add(p, "--sequences", type=int)
    _add(p, "--eval-tokens", dest="eval_tokens", type=int)
    _add(p, "--out")

    p = cmd("report", "summary markdown, density-by-layer CSV and PGM images")
    _add(p, "--in", dest="in", nargs="*", help="profile CSVs")
    _add(p, "--tensors", help="directory of activation tensors for mask/heatmap images")
    _add(p, "--alpha", type=float)
    _add(p, "--out")
    return parser


def resolve(command: str, explicit: dict) -> dict:
    defaults, required = COMMANDS[command]
    merged = dict(defaults)
    config_path = explicit.pop("config", None)
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
        if doc.pop("command", command) != command:
            raise ValidationError("config was written for another subcommand")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(doc)
    merged.update(explicit)
    missing = [k for k in required if merged.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(
            "--" + k.replace("_", "-") for k in missing))
    return merged


def echo_config(path: Path, command: str, opts: dict) -> None:
    atomic_write(path, json.dumps({"command": command, **opts}, indent=2, sort_keys=True) + "\n")


def _config_path(out: str) -> Path:
    return Path(str(out) + ".config.json")


def _int_list(v) -> list[int]:
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    try:
        return [int(x) for x in str(v).split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected a comma list of integers, got {v!r}") from None


def _otf_files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("*.otf"))
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return [path]


def load_activations(path) -> list[ActivationTensor]:
    out = []
    for f in _otf_files(path):
        t = tensor_from_otf(*read_otf(f))
        if isinstance(t, ActivationTensor):
            out.append(t)
    return out


def load_weights(path) -> dict:
    out = {}
    for f in _otf_files(path):
        t = tensor_from_otf(*read_otf(f))
        if isinstance(t, WeightMatrix):
            out[(t.position, t.layer)] = t
    return out


def grouped_activations(path) -> list[ActivationTensor]:
    """Concatenate same-(position, layer) sequences in file-name order."""
    cells = defaultdict(list)
    for x in load_activations(path):
        cells[(x.position, x.layer)].append(x)
    out = []
    order = {p: i for i, p in enumerate(PositionId)}
    for key in sorted(cells, key=lambda k: (order.get(k[0], -1), -1 if k[1] is None else k[1])):
        xs = cells[key]
        out.append(xs[0] if len(xs) == 1 else
                   ActivationTensor(np.concatenate([x.data for x in xs]), key[0], key[1]))
    return out


def cmd_profile(o: dict) -> None:
    cfg = ThresholdConfig(float(o["alpha"]))
    tensors = grouped_activations(o["in"])
    if not tensors:
        raise ValidationError(f"no activation tensors found in {o['in']}")
    reports = [profile_tensor(x, int(o["group_size"]), cfg) for x in tensors]
    atomic_write(o["out"], profile_csv(reports))
    if o["emit_masks"]:
        for x, rep in zip(tensors, reports):
            emit_images(x, rep.threshold, o["emit_masks"], cell_stem(x.position, x.layer))
    for rep in reports:
        dens = "n/a" if rep.mean_density is None else f"{rep.mean_density:.3f}"
        print(f"{rep.position} L{rep.layer}: mean density {dens} ({rep.tier or 'no outliers'})")
    echo_config(_config_path(o["out"]), "profile", o)


def cmd_build_table(o: dict) -> None:
    if not o["timestamp"]:
        o["timestamp"] = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    calib = CalibrationSet(x for x in load_activations(o["calib"]) if x.position is not None)
    table = build_table(calib, int(o["group_size"]), ThresholdConfig(float(o["alpha"])),
                        created=o["timestamp"])
    save_table(table, o["out"])
    active = sum(int((np.asarray(l) >= 0).sum()) for e in table.positions.values() for l in e.layers)
    total = sum(len(l) for e in table.positions.values() for l in e.layers)
    print(f"table: {len(table.positions)} positions, {active}/{total} groups protected")
    echo_config(_config_path(o["out"]), "build-table", o)


def _table_slice(table, x) -> tuple[np.ndarray, GroupSpec]:
    if x.position is None or x.layer is None:
        raise ValidationError("tensor carries no (position, layer) tag")
    g = table.group_spec(x.position)
    return table.slice(x.position, x.layer), g


def cmd_quantize(o: dict) -> None:
    x = tensor_from_otf(*read_otf(o["in"]))
    if not isinstance(x, ActivationTensor):
        raise ValidationError(f"{o['in']} is not an activation tensor")
    table = load_table(o["table"])
    if table.group_size != int(o["group_size"]):
        raise ValidationError(f"table group size {table.group_size} != --group-size {o['group_size']}")
    idx, g = _table_slice(table, x)
    q, buf = osc_quantize(x, idx, g, ElementFormat.parse(o["fmt"]))
    save_quantized(q, o["out"])
    write_otf(o["outliers"], buf.values, {
        "kind": "outliers", "position": str(x.position), "layer": x.layer,
        "indices": [int(i) for i in buf.indices],
    })
    print(f"{x.position} L{x.layer}: {int((buf.indices >= 0).sum())}/{g.group_count} groups protected")
    echo_config(_config_path(o["out"]), "quantize", o)


def cmd_matmul(o: dict) -> None:
    qx = load_quantized(o["x"])
    values, meta = read_otf(o["outliers"])
    meta = meta or {}
    if meta.get("kind") != "outliers":
        raise ValidationError(f"{o['outliers']} is not an outlier buffer")
    w = tensor_from_otf(*read_otf(o["w"]))
    if not isinstance(w, WeightMatrix):
        raise ValidationError(f"{o['w']} is not a weight matrix")
    table = load_table(o["table"])
    idx, g = _table_slice(table, qx)
    if g != qx.group_spec:
        raise ValidationError(f"table group spec {g} != base tensor {qx.group_spec}")
    if [int(i) for i in idx] != meta.get("indices"):
        raise ValidationError("outlier buffer was produced with a different table slice")
    buf = OutlierBuffer(values, idx)
    wl = gather_weight_rows(w, idx, g)
    y = dual_path_gemm(qx, buf, quantize_weight(w, g, qx.fmt), wl)
    write_otf(o["out"], y, {"kind": "output", "position": str(qx.position), "layer": qx.layer})
    if o["report"]:
        bypass = bypass_product(buf.values, wl.matrix)
        row = {
            "position": str(qx.position), "layer": qx.layer, "fmt": qx.fmt.value,
            "tokens": qx.rows, "out_channels": w.out_channels,
            "protected_groups": int((idx >= 0).sum()),
            "path_b_share": repr(float(np.linalg.norm(bypass) / max(np.linalg.norm(y), 1e-300))),
            "rel_error": "",
        }
        if o["ref"]:
            x = tensor_from_otf(*read_otf(o["ref"]))
            row["rel_error"] = repr(relative_error(y, reference_gemm(x, w)))
        buf_io = io.StringIO()
        writer = csv.DictWriter(buf_io, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        atomic_write(o["report"], buf_io.getvalue())
    echo_config(_config_path(o["out"]), "matmul", o)


def cmd_eval_error(o: dict) -> None:
    names = list(NAMED_POLICIES) if o["policy"] == "all" else [
        s.strip() for s in str(o["policy"]).split(",") if s.strip()]
    policies = {n: named_policy(n) for n in names}
    xs = grouped_activations(o["in"])
    ws = load_weights(o["weights"])
    inputs = {}
    for x in xs:
        key = (x.position, x.layer)
        if key not in ws:
            raise ValidationError(f"no weight matrix for {key[0]}, layer {key[1]}")
        inputs[key] = (x, ws[key])
    if not inputs:
        raise ValidationError(f"no tagged activation tensors found in {o['in']}")
    table = load_table(o["table"]) if o["table"] else None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["policy", "position", "layer", "treatment", "rel_error"])
    for name, policy in policies.items():
        results = apply_policy(inputs, policy, table, int(o["group_size"]))
        for r in results:
            writer.writerow([name, r.position.value, r.layer, r.treatment.value, repr(r.rel_error)])
        writer.writerow([name, "mean", "", "", repr(mean_error(results))])
        print(f"{name:>10}: mean relative error {mean_error(results):.5f}")
    atomic_write(o["out"], buf.getvalue())
    echo_config(_config_path(o["out"]), "eval-error", o)


def cmd_perf(o: dict) -> None:
    if o["hw"] == "default":
        hw = HardwareProfile()
    else:
        hw = HardwareProfile.from_json(Path(o["hw"]).read_text(encoding="utf-8"))
    dims = CLASSIC_DIMS if o["dims"] == "classic" else _int_list(o["dims"])
    cells = sweep_table(_int_list(o["M"]), _int_list(o["G"]), dims, hw)
    print("   G |  M < 128 (range)  |  M >= 128              | Path B / Path A")
    for row in summarize(cells):
        g = row["G"]
        small = "-" if row["small_m"] is None else f"{row['small_m'][0]:.2f}x-{row['small_m'][1]:.2f}x"
        if row["large_m"] is None:
            large = "-"
        else:
            lo, hi = row["large_m"]
            large = f"{lo:.2f}x" if round(lo, 2) == round(hi, 2) else f"{lo:.2f}x-{hi:.2f}x"
            large += " (compute-bound)" if row["large_m_compute_bound"] else ""
        overhead = next(c.overhead for c in cells if c.group_size == g)
        print(f"{g:>4} | {small:<17} | {large:<22} | {100 * overhead:.1f}%")
    if o["out"]:
        atomic_write(o["out"], sweep_csv(cells))
        echo_config(_config_path(o["out"]), "perf", o)


def cmd_synth(o: dict) -> None:
    out = Path(o["out"])
    positions = list(PositionId) if o["positions"] == "all" else [
        PositionId.parse(s.strip()) for s in str(o["positions"]).split(",") if s.strip()]
    template = SynthSpec(int(o["S"]), int(o["H"]), int(o["G"]), magnitude=float(o["mag"]),
                         rate=float(o["rate"]))
    override = None
    if o["persistence"] is not None:
        override = {p: float(o["persistence"]) for p in PositionId}
    grid = generate_grid(positions, int(o["layers"]), template, master_seed=int(o["seed"]),
                         sequences=int(o["sequences"]), eval_tokens=o["eval_tokens"],
                         out_channels=int(o["N"]), persistence=override)
    for key in grid.calibration.keys():
        stem = cell_stem(*key)
        for i, x in enumerate(grid.calibration.sequences(key)):
            save_tensor(x, out / "calib" / f"{stem}.s{i}.otf")
        save_tensor(grid.evaluation[key], out / "eval" / f"{stem}.otf")
        save_tensor(grid.weights[key], out / "weights" / f"{stem}.otf")
        atomic_write(out / "truth" / f"{stem}.json", grid.truth[key].to_json(grid.specs[key]))
    print(f"wrote {len(grid.calibration)} cells to {out}")
    echo_config(out / "config.json", "synth", o)


def cmd_report(o: dict) -> None:
    out = Path(o["out"])
    summaries = []
    for f in o["in"] or []:
        summaries.extend(read_profile_summaries(Path(f).read_text(encoding="utf-8")))
    atomic_write(out / "summary.md", summary_markdown(summaries))
    atomic_write(out / "density_by_layer.csv", density_by_layer_csv(summaries))
    if o["tensors"]:
        cfg = ThresholdConfig(float(o["alpha"]))
        for x in grouped_activations(o["tensors"]):
            emit_images(x, compute_threshold(x, cfg), out, cell_stem(x.position, x.layer))
    print(f"{len(summaries)} (position, layer) summaries -> {out}")
    echo_config(out / "config.json", "report", o)


HANDLERS: dict[str, Callable[[dict], None]] = {
    "profile": cmd_profile,
    "build-table": cmd_build_table,
    "quantize": cmd_quantize,
    "matmul": cmd_matmul,
    "eval-error": cmd_eval_error,
    "perf": cmd_perf,
    "synth": cmd_synth,
    "report": cmd_report,
}


def version_text() -> str:
    return (f"osc {__version__}\nOTF1 version {OTF_VERSION}\nOQT1 version {OQT_VERSION}\n"
            f"suppression-table JSON version {TABLE_VERSION}")


def run(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on grammar errors
    if args.version:
        print(version_text())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        print("osc: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "version")}
    try:
        opts = resolve(args.command, explicit)
        HANDLERS[args.command](opts)
    except UsageError as exc:
        parser.subcommands[args.command].print_usage(sys.stderr)
        print(f"osc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSCError, ValueError) as exc:
        print(f"osc {args.command}: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"osc {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


def main() -> None:
    sys.exit(run())
