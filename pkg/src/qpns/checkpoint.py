"""Binary checkpoints of fields and paths.

Layout (all little-endian):

    magic      4 bytes  b"QPNS"
    version    u32
    kind       u32      0 = field, 1 = path
    n          u32
    L          f64
    theta      f64      the D(A^theta) space the coefficients are meant in
    nmodes     u32      0 for the full lattice, else that many (k1, k2) i32 pairs follow
    count      u32      number of stored states (1 for a field)
    a, b       f64      time interval of a path (0, 0 for a field)
    payload    count * 2 * n * (n//2 + 1) complex coefficients as (re, im) f64 pairs,
               row-major over (state, component, k1 row, k2 column)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .skeleton import Path, TimeGrid
from .spectral import SpectralField, WaveLattice

MAGIC = b"QPNS"
VERSION = 1
_HEAD = struct.Struct("<4sIIIddI")
_TAIL = struct.Struct("<Idd")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass(frozen=True)
class Header:
    kind: int
    n: int
    l: float
    theta: float
    modes: tuple[tuple[int, int], ...] | None
    count: int
    a: float
    b: float
    payload_offset: int

    @property
    def lattice(self) -> WaveLattice:
        return WaveLattice(self.n, self.l, self.modes)


def save_checkpoint(dest: str | os.PathLike, obj: SpectralField | Path, theta: float = 0.0) -> None:
    if isinstance(obj, SpectralField):
        kind, lat, data, a, b = 0, obj.lattice, obj.coeffs[None], 0.0, 0.0
    elif isinstance(obj, Path):
        kind, lat, data, a, b = 1, obj.lattice, obj.states, obj.grid.a, obj.grid.b
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    modes = lat.modes or ()
    parts = [_HEAD.pack(MAGIC, VERSION, kind, lat.n, lat.l, float(theta), len(modes))]
    parts += [struct.pack("<ii", k1, k2) for k1, k2 in modes]
    parts.append(_TAIL.pack(data.shape[0], a, b))
    payload = np.ascontiguousarray(data, dtype="<c16").tobytes()
    with open(dest, "wb") as fh:
        fh.write(b"".join(parts))
        fh.write(payload)


def read_header(buf: bytes) -> Header:
    if len(buf) < _HEAD.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, kind, n, l, theta, nmodes = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in (0, 1):
        raise CheckpointError(f"unknown record kind {kind}")
    off = _HEAD.size
    if len(buf) < off + 8 * nmodes + _TAIL.size:
        raise CheckpointError("truncated checkpoint header")
    modes = tuple(struct.unpack_from("<ii", buf, off + 8 * i) for i in range(nmodes)) or None
    off += 8 * nmodes
    count, a, b = _TAIL.unpack_from(buf, off)
    return Header(kind, n, l, theta, modes, count, a, b, off + _TAIL.size)


def load_checkpoint(src: str | os.PathLike, lattice: WaveLattice | None = None) -> SpectralField | Path:
    """Read a field or path; ``lattice``, if given, must match the stored one exactly."""
    with open(src, "rb") as fh:
        buf = fh.read()
    h = read_header(buf)
    try:
        lat = h.lattice
    except ValueError as exc:
        raise CheckpointError(f"invalid lattice in header: {exc}") from exc
    if lattice is not None and lattice != lat:
        raise CheckpointError(
            f"checkpoint lattice (n={lat.n}, L={lat.l}) does not match the requested one "
            f"(n={lattice.n}, L={lattice.l})")
    shape = (h.count,) + lat.shape
    size = int(np.prod(shape)) * 16
    if len(buf) != h.payload_offset + size:
        raise CheckpointError(f"payload has {len(buf) - h.payload_offset} bytes, expected {size}")
    data = np.frombuffer(buf, dtype="<c16", offset=h.payload_offset).reshape(shape).astype(complex)
    if h.kind == 0:
        if h.count != 1:
            raise CheckpointError("a field record must hold exactly one state")
        return SpectralField(lat, data[0])
    if h.count < 2:
        raise CheckpointError("a path record needs at least two states")
    return Path(TimeGrid(h.a, h.b, h.count - 1), lat, data)
