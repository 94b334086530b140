"""Binary field containers, portable graymap export, and CSV helpers.

Field container ("WFLD", version 1, little-endian):
    magic 4s | version u32 | d u32 | n u32 | origin d*f64 |
    edge_length d*f64 (equal per axis) | values n^d * f64 lexicographic

Kernel container ("WKRN") is identical with n_K in place of n; origin is
the leading stencil offset -(n_K-1)/2 and edge_length is n_K, both in
index units.

CSV files carry a comma-separated header row; floats are written with 17
significant digits so a write/read round trip reproduces float64 exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import GridSpec, NodalField, StencilKernel

__all__ = [
    "FormatError",
    "save_field",
    "load_field",
    "save_kernel",
    "load_kernel",
    "save_pgm",
    "field_to_pgm",
    "write_csv",
    "read_csv",
    "field_to_csv",
    "field_from_csv",
    "format_float",
]

FIELD_MAGIC = b"WFLD"
KERNEL_MAGIC = b"WKRN"
CONTAINER_VERSION = 1


class FormatError(ValueError):
    """Malformed or mismatched on-disk container."""


def format_float(x: float) -> str:
    return f"{x:.17g}"


def _write_container(path, magic: bytes, d: int, n: int, origin, edge, values: np.ndarray):
    parts = [
        magic,
        struct.pack("<III", CONTAINER_VERSION, d, n),
        np.asarray(origin, dtype="<f8").tobytes(),
        np.asarray([edge] * d, dtype="<f8").tobytes(),
        np.ascontiguousarray(values, dtype="<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def _read_container(path, magic: bytes):
    buf = Path(path).read_bytes()
    name = magic.decode()
    if len(buf) < 16 or buf[:4] != magic:
        raise FormatError(f"{path}: not a {name} container")
    version, d, n = struct.unpack("<III", buf[4:16])
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported {name} version {version}")
    header_end = 16 + 16 * d
    if len(buf) < header_end:
        raise FormatError(f"{path}: truncated {name} header")
    origin = np.frombuffer(buf[16 : 16 + 8 * d], dtype="<f8")
    edges = np.frombuffer(buf[16 + 8 * d : header_end], dtype="<f8")
    if not np.all(edges == edges[0]):
        raise FormatError(f"{path}: axes disagree on edge_length")
    expected = header_end + 8 * n**d
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    values = np.frombuffer(buf[header_end:], dtype="<f8").astype(np.float64)
    return d, n, tuple(origin), float(edges[0]), values


def save_field(U: NodalField, path) -> None:
    spec = U.spec
    _write_container(path, FIELD_MAGIC, spec.d, spec.n, spec.origin, spec.edge_length, U.values)


def load_field(path) -> NodalField:
    d, n, origin, edge, values = _read_container(path, FIELD_MAGIC)
    return NodalField(GridSpec(d, n, origin, edge), values)


def save_kernel(K: StencilKernel, path) -> None:
    origin = (-float(K.radius),) * K.d
    _write_container(path, KERNEL_MAGIC, K.d, K.n_K, origin, float(K.n_K), K.weights)


def load_kernel(path) -> StencilKernel:
    d, n_K, _origin, _edge, values = _read_container(path, KERNEL_MAGIC)
    return StencilKernel(d, n_K, values)


# ---------------------------------------------------------------------------
# Images: binary portable graymap, [-1, 1] mapped to [0, 255].


def save_pgm(array2d: np.ndarray, path) -> None:
    arr = np.asarray(array2d)
    if arr.ndim != 2:
        raise ValueError("PGM export needs a 2D array")
    clipped = np.clip(arr, -1.0, 1.0)
    bytes_ = np.round((clipped + 1.0) * 127.5).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + bytes_.tobytes())


def field_to_pgm(U: NodalField, path, slice_axis: int | None = None, slice_index: int | None = None) -> None:
    """2D fields directly; 3D fields as an axis slice (middle by default)."""
    if U.spec.d == 2:
        save_pgm(U.as_grid(), path)
        return
    if U.spec.d != 3:
        raise ValueError("image export supports 2D and 3D fields")
    axis = 2 if slice_axis is None else slice_axis
    index = U.spec.n // 2 if slice_index is None else slice_index
    if not 0 <= axis < 3 or not 0 <= index < U.spec.n:
        raise ValueError("slice out of range")
    save_pgm(np.take(U.as_grid(), index, axis=axis), path)


# ---------------------------------------------------------------------------
# CSV.


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = [format_float(x) if isinstance(x, float) else str(x) for x in row]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def field_to_csv(U: NodalField, path) -> None:
    """Lossless CSV: grid geometry as comments, one node per row."""
    spec = U.spec
    meta = (
        f"# WFLD d={spec.d} n={spec.n} "
        f"origin={','.join(format_float(o) for o in spec.origin)} "
        f"edge_length={format_float(spec.edge_length)}"
    )
    header = [f"i{a}" for a in range(spec.d)] + ["value"]
    indices = np.stack(np.unravel_index(np.arange(spec.num_nodes), spec.shape), axis=1)
    lines = [meta, ",".join(header)]
    for idx, v in zip(indices, U.values):
        lines.append(",".join(str(i) for i in idx) + "," + format_float(float(v)))
    Path(path).write_text("\n".join(lines) + "\n")


def field_from_csv(path) -> NodalField:
    text = Path(path).read_text().splitlines()
    meta = None
    for ln in text:
        if ln.startswith("# WFLD"):
            meta = ln
            break
    if meta is None:
        raise FormatError(f"{path}: missing '# WFLD' geometry comment")
    fields = dict(part.split("=", 1) for part in meta[2:].split() if "=" in part)
    try:
        d = int(fields["d"])
        n = int(fields["n"])
        origin = tuple(float(x) for x in fields["origin"].split(","))
        edge = float(fields["edge_length"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed geometry comment") from exc
    spec = GridSpec(d, n, origin, edge)
    data_lines = [ln for ln in text if ln and not ln.startswith("#")]
    rows = [ln.split(",") for ln in data_lines[1:]]
    if len(rows) != spec.num_nodes:
        raise FormatError(f"{path}: expected {spec.num_nodes} rows, found {len(rows)}")
    values = np.empty(spec.num_nodes)
    shape = spec.shape
    for row in rows:
        idx = tuple(int(x) for x in row[:d])
        values[np.ravel_multi_index(idx, shape)] = float(row[d])
    return NodalField(spec, values)
