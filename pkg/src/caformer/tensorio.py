"""Binary tensor format (CATM) and directory-based parameter manifests.

CATM layout: magic b"CATM", u32 version (=1), u32 rows, u32 cols, then
rows*cols little-endian float64 values in row-major order.

A parameter directory holds one CATM file per tensor plus a ``manifest.txt``
with one "name ROWSxCOLS filename" line per tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import UsageError
from .numerics import TokenMatrix

MAGIC = b"CATM"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def dump_catm(m: TokenMatrix) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, m.rows, m.cols)
    return header + np.ascontiguousarray(m.data, dtype="<f8").tobytes()


def parse_catm(blob: bytes) -> TokenMatrix:
    if len(blob) < _HEADER.size:
        raise UsageError("CATM blob too short for header")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise UsageError(f"bad CATM magic {magic!r}")
    if version != VERSION:
        raise UsageError(f"unsupported CATM version {version}")
    expected = _HEADER.size + rows * cols * 8
    if len(blob) != expected:
        raise UsageError(f"CATM payload size {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(rows, cols)
    return TokenMatrix(data)


def save_catm(path: str | Path, m: TokenMatrix) -> None:
    Path(path).write_bytes(dump_catm(m))


def load_catm(path: str | Path) -> TokenMatrix:
    return parse_catm(Path(path).read_bytes())


def export_params(directory: str | Path, tensors: dict[str, TokenMatrix]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, tensor in tensors.items():
        fname = name.replace("/", "_").replace(".", "_") + ".catm"
        save_catm(directory / fname, tensor)
        lines.append(f"{name} {tensor.rows}x{tensor.cols} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def import_params(directory: str | Path) -> dict[str, TokenMatrix]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise UsageError(f"no manifest.txt in {directory}")
    tensors: dict[str, TokenMatrix] = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, fname = line.split()
        tensor = load_catm(directory / fname)
        rows, cols = (int(v) for v in shape.split("x"))
        if tensor.shape != (rows, cols):
            raise UsageError(f"{name}: manifest shape {shape} != file shape {tensor.shape}")
        tensors[name] = tensor
    return tensors
