"""Binary tensor files (OTF1) and quantized block files (OQT1).

OTF1 layout, all integers little-endian::

    b"OTF1" | u8 version=1 | u8 dtype (0=float32) | u8 rank | u8 pad=0
    rank x u64 dims | row-major float32 payload
    [u32 length | UTF-8 JSON metadata]

OQT1 reuses the header with the dtype byte holding the element format code
(0=FP4 E2M1, 1=FP8 E4M3) and a u32 group size after the dims, followed by
the packed codes, then one E8M0 byte per (row, group), then the optional
metadata trailer.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    NonFinitePayloadError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .mx import (
    ElementFormat,
    QuantizedBlockTensor,
    e8m0_to_exponents,
    exponents_to_e8m0,
    unpack_fp4,
)
from .tensor import ActivationTensor, GroupSpec, PositionId, WeightMatrix

OTF_MAGIC = b"OTF1"
OQT_MAGIC = b"OQT1"
OTF_VERSION = 1
OQT_VERSION = 1
DTYPE_FLOAT32 = 0

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, data: Union[bytes, str]) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _header(magic: bytes, version: int, dtype: int, dims: tuple[int, ...]) -> bytes:
    return magic + struct.pack("<BBBB", version, dtype, len(dims), 0) + struct.pack(
        f"<{len(dims)}Q", *dims
    )


def _trailer(meta: Optional[dict]) -> bytes:
    if not meta:
        return b""
    blob = canonical_json(meta)
    return struct.pack("<I", len(blob)) + blob


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedPayloadError(
                f"truncated {what}: need {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def header(self, magic: bytes, version: int) -> tuple[int, tuple[int, ...]]:
        got = self.take(4, "magic")
        if got != magic:
            raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
        ver, dtype, rank, _pad = struct.unpack("<BBBB", self.take(4, "header"))
        if ver != version:
            raise VersionMismatchError(f"{magic.decode()} version {ver}, expected {version}")
        dims = struct.unpack(f"<{rank}Q", self.take(8 * rank, "dims"))
        return dtype, dims

    def trailer(self) -> Optional[dict]:
        rest = len(self.raw) - self.pos
        if rest == 0:
            return None
        (n,) = struct.unpack("<I", self.take(4, "metadata length"))
        blob = self.take(n, "metadata")
        if self.pos != len(self.raw):
            raise FormatError(f"{len(self.raw) - self.pos} unexpected bytes after metadata")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"metadata is not valid JSON: {exc}") from None
        if not isinstance(meta, dict):
            raise FormatError("metadata must be a JSON object")
        return meta


def encode_otf(array: np.ndarray, meta: Optional[dict] = None) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    return _header(OTF_MAGIC, OTF_VERSION, DTYPE_FLOAT32, arr.shape) + arr.tobytes() + _trailer(meta)


def decode_otf(raw: bytes) -> tuple[np.ndarray, Optional[dict]]:
    r = _Reader(raw)
    dtype, dims = r.header(OTF_MAGIC, OTF_VERSION)
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}")
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = r.take(4 * count, "payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    bad = ~np.isfinite(arr)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise NonFinitePayloadError(f"non-finite value in payload at flat index {flat}")
    return arr, r.trailer()


def write_otf(path: PathLike, array: np.ndarray, meta: Optional[dict] = None) -> None:
    atomic_write(path, encode_otf(array, meta))


def read_otf(path: PathLike) -> tuple[np.ndarray, Optional[dict]]:
    return decode_otf(Path(path).read_bytes())


def _tag_meta(kind: str, position, layer) -> dict:
    meta = {}
    if kind != "activation":
        meta["kind"] = kind
    if position is not None:
        meta["position"] = str(position)
    if layer is not None:
        meta["layer"] = int(layer)
    return meta


def save_tensor(t: Union[ActivationTensor, WeightMatrix], path: PathLike) -> None:
    kind = "weight" if isinstance(t, WeightMatrix) else "activation"
    write_otf(path, t.data, _tag_meta(kind, t.position, t.layer))


def tensor_from_otf(arr: np.ndarray, meta: Optional[dict]):
    meta = meta or {}
    kind = meta.get("kind", "activation")
    if arr.ndim != 2:
        raise FormatError(f"expected a rank-2 tensor, file has rank {arr.ndim}")
    if kind == "weight":
        return WeightMatrix(arr, meta.get("position"), meta.get("layer"))
    if kind == "activation":
        return ActivationTensor(arr, meta.get("position"), meta.get("layer"))
    raise FormatError(f"file holds a {kind!r} array, not an activation or weight tensor")


def load_tensor(path: PathLike) -> Union[ActivationTensor, WeightMatrix]:
    return tensor_from_otf(*read_otf(path))


def encode_oqt(q: QuantizedBlockTensor) -> bytes:
    head = _header(OQT_MAGIC, OQT_VERSION, q.fmt.file_code, q.codes.shape)
    head += struct.pack("<I", q.group_spec.group_size)
    scales = exponents_to_e8m0(q.scales).tobytes()
    return head + q.packed_codes() + scales + _trailer(_tag_meta("activation", q.position, q.layer))


def decode_oqt(raw: bytes) -> QuantizedBlockTensor:
    r = _Reader(raw)
    fmt_code, dims = r.header(OQT_MAGIC, OQT_VERSION)
    fmt = ElementFormat.from_file_code(fmt_code)
    if len(dims) != 2:
        raise FormatError(f"OQT1 tensors are rank 2, got rank {len(dims)}")
    rows, channels = dims
    (group_size,) = struct.unpack("<I", r.take(4, "group size"))
    g = GroupSpec.for_channels(channels, group_size)
    count = rows * channels
    if fmt is ElementFormat.FP4_E2M1:
        codes = unpack_fp4(r.take(count // 2, "codes"), count)
    else:
        codes = np.frombuffer(r.take(count, "codes"), dtype=np.uint8).copy()
    scales = np.frombuffer(r.take(rows * g.group_count, "scales"), dtype=np.uint8)
    meta = r.trailer() or {}
    return QuantizedBlockTensor(
        codes.reshape(rows, channels),
        e8m0_to_exponents(scales).reshape(rows, g.group_count),
        fmt,
        g,
        PositionId.parse(meta["position"]) if "position" in meta else None,
        meta.get("layer"),
    )


def save_quantized(q: QuantizedBlockTensor, path: PathLike) -> None:
    atomic_write(path, encode_oqt(q))


def load_quantized(path: PathLike) -> QuantizedBlockTensor:
    return decode_oqt(Path(path).read_bytes())
