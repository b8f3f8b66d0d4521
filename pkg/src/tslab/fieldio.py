"""Binary checkpoint format for spectral fields.

Layout (little endian)::

    b"TSLF" | u32 version | u32 d | u32 N | u32 c | float64 payload

The payload holds the coefficient array in row-major FFT index order with
real and imaginary parts interleaved. Metadata lives in a JSON sidecar next to
the binary file (``<name>.json``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .spectral import SpectralField, TorusGrid

MAGIC = b"TSLF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FieldFormatError(ValueError):
    pass


def to_bytes(f: SpectralField) -> bytes:
    g = f.grid
    head = _HEADER.pack(MAGIC, VERSION, g.dim, g.n, f.components)
    payload = np.ascontiguousarray(f.coeffs).view(np.float64).astype("<f8", copy=False)
    return head + payload.tobytes()


def from_bytes(buf: bytes) -> SpectralField:
    if len(buf) < _HEADER.size:
        raise FieldFormatError("truncated header")
    magic, version, d, n, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    grid = TorusGrid(d, n)
    count = 2 * c * n**d
    body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    if body.size != count:
        raise FieldFormatError(f"payload has {body.size} values, expected {count}")
    coeffs = body.astype(np.float64).view(np.complex128).reshape((c,) + grid.shape)
    return SpectralField(grid, coeffs)


def save_field(path, f: SpectralField, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(f))
    meta = {"format": "TSLF", "version": VERSION, "dim": f.grid.dim, "n": f.grid.n,
            "components": f.components}
    meta.update(metadata or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_field(path) -> tuple[SpectralField, dict]:
    path = Path(path)
    f = from_bytes(path.read_bytes())
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return f, meta
