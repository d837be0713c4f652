"""Binary and text file formats shared across the pipeline and the exporter.

Containers are little-endian with 4-byte ASCII magics:

.feat  "EPIF" | version u32=1 | grid_h u32 | grid_w u32 | E u32 | P u32 |
       dtype u8=1 (float32) | grid_h*grid_w*E float32, row-major, E innermost
.dpt   "EPID" | version u32=1 | H u32 | W u32 | H*W float32 row-major,
       NaN encodes invalid
.epiw  "EPIW" | version u32=1 | n_tensors u32 | per tensor:
       name_len u32 | name utf-8 | dtype u8 (1=f32, 2=f64) | ndim u32 |
       dims u32[ndim] | payload

Text formats: correspondence CSV "us,vs,ut,vt", match CSV
"us,vs,ut,vt,score", both with 6 decimal places.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

FEAT_MAGIC = b"EPIF"
DEPTH_MAGIC = b"EPID"
WEIGHTS_MAGIC = b"EPIW"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _open_binary(path):
    try:
        return open(path, "rb")
    except FileNotFoundError as exc:
        raise InputError(f"{path}: missing file") from exc


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def _check_header(fh, magic: bytes) -> None:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")


# ---------------------------------------------------------------- .feat

def feat_bytes(data: np.ndarray, patch_size: int) -> bytes:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise InputError("feature data must be grid_h x grid_w x E")
    gh, gw, E = data.shape
    header = FEAT_MAGIC + struct.pack("<IIIIIB", FORMAT_VERSION, gh, gw, E, patch_size, 1)
    return header + data.tobytes()


def write_feat(path, data: np.ndarray, patch_size: int) -> None:
    atomic_write_bytes(path, feat_bytes(data, patch_size))


def read_feat(path):
    """Returns (data as grid_h x grid_w x E float32, patch_size)."""
    with _open_binary(path) as fh:
        _check_header(fh, FEAT_MAGIC)
        gh, gw, E, P = struct.unpack("<IIII", _read_exact(fh, 16, "grid dims"))
        (dtype_code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
        if dtype_code != 1:
            raise FormatError(f"unsupported feature dtype code {dtype_code}")
        if gh == 0 or gw == 0 or E == 0 or P == 0:
            raise FormatError(f"zero dimension in header: grid {gh}x{gw}, E={E}, P={P}")
        n = gh * gw * E
        payload = fh.read(n * 4 + 1)
        if len(payload) < n * 4:
            raise FormatError(
                f"payload length {len(payload)} bytes, header implies {n * 4}"
            )
        if len(payload) > n * 4:
            raise FormatError("trailing bytes after feature payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(gh, gw, E)
    return data.copy(), int(P)


# ---------------------------------------------------------------- .dpt

def dpt_bytes(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise InputError("depth data must be H x W")
    H, W = values.shape
    return DEPTH_MAGIC + struct.pack("<III", FORMAT_VERSION, H, W) + values.tobytes()


def write_dpt(path, values: np.ndarray) -> None:
    atomic_write_bytes(path, dpt_bytes(values))


def read_dpt(path) -> np.ndarray:
    """Returns the H x W float32 grid; NaN entries mark invalid depths."""
    with _open_binary(path) as fh:
        _check_header(fh, DEPTH_MAGIC)
        H, W = struct.unpack("<II", _read_exact(fh, 8, "dims"))
        if H == 0 or W == 0:
            raise FormatError(f"zero dimension in header: {H}x{W}")
        n = H * W
        payload = fh.read(n * 4 + 1)
        if len(payload) < n * 4:
            raise FormatError(f"payload length {len(payload)} bytes, header implies {n * 4}")
        if len(payload) > n * 4:
            raise FormatError("trailing bytes after depth payload")
    return np.frombuffer(payload, dtype="<f4").reshape(H, W).copy()


# ---------------------------------------------------------------- .epiw

def weights_bytes(tensors: "dict[str, np.ndarray] | list[tuple[str, np.ndarray]]") -> bytes:
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    out = [WEIGHTS_MAGIC + struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise InputError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def write_weights(path, tensors) -> None:
    atomic_write_bytes(path, weights_bytes(tensors))


def read_weights(path) -> "dict[str, np.ndarray]":
    """Returns the ordered name -> tensor mapping."""
    tensors: dict[str, np.ndarray] = {}
    with _open_binary(path) as fh:
        _check_header(fh, WEIGHTS_MAGIC)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"name length #{i}"))
            name = _read_exact(fh, name_len, f"name #{i}").decode("utf-8")
            code, ndim = struct.unpack("<BI", _read_exact(fh, 5, f"dtype/ndim of {name}"))
            if code not in _DTYPES:
                raise FormatError(f"tensor {name!r}: unsupported dtype code {code}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"dims of {name}"))
            n = int(np.prod(dims)) if ndim else 1
            raw = _read_exact(fh, n * _DTYPES[code].itemsize, f"payload of {name}")
            tensors[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(dims).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor")
    return tensors


# ---------------------------------------------------------------- CSV

def correspondences_csv(us, vs, ut, vt) -> str:
    lines = ["us,vs,ut,vt"]
    for a, b, c, d in zip(us, vs, ut, vt):
        lines.append(f"{a:.6f},{b:.6f},{c:.6f},{d:.6f}")
    return "\n".join(lines) + "\n"


def matches_csv(us, vs, ut, vt, score) -> str:
    lines = ["us,vs,ut,vt,score"]
    for a, b, c, d, s in zip(us, vs, ut, vt, score):
        lines.append(f"{a:.6f},{b:.6f},{c:.6f},{d:.6f},{s:.6f}")
    return "\n".join(lines) + "\n"


def parse_matches_csv(text: str, path: str = "<string>"):
    """Parse a match CSV; returns (ps (N,2), pt (N,2), score (N,)) arrays.

    Raises `InputError` naming the 1-based line number of the first bad row.
    Also accepts plain correspondence CSVs (no score column): scores are 1.
    """
    lines = [ln for ln in text.splitlines()]
    if not lines:
        raise InputError(f"{path}: empty match file")
    header = lines[0].strip().split(",")
    if header[:4] != ["us", "vs", "ut", "vt"]:
        raise InputError(f"{path}: line 1: bad header {lines[0]!r}")
    has_score = len(header) >= 5 and header[4] == "score"
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        parts = ln.split(",")
        want = 5 if has_score else 4
        try:
            if len(parts) != want:
                raise ValueError(f"expected {want} fields, got {len(parts)}")
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise InputError(f"{path}: line {i}: {exc}") from exc
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), 5 if has_score else 4)
    ps = arr[:, 0:2]
    pt = arr[:, 2:4]
    score = arr[:, 4] if has_score else np.ones(len(rows))
    return ps, pt, score
