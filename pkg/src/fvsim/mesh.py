"""Cartesian mesh container, face topology, synthetic generators, binary I/O.

Cell arrays are stored with shape ``(nz, ny, nx)`` so that their C-order
flattening is x-fastest, then y, then z. Transmissibilities are stored once
per face in five families, which makes ``T_KL == T_LK`` hold by
construction.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, NamedTuple

import numpy as np

from .physics import F32

MESH_MAGIC = b"FVM1"
FIELD_MAGIC = b"FVF1"
FORMAT_VERSION = 1
MAX_CELLS = 2**31 - 1

_HEADER = struct.Struct("<4sIIII")


class Family(IntEnum):
    X = 0
    Y = 1
    Z = 2
    D1 = 3  # (+x, +y)
    D2 = 4  # (+x, -y)


class Direction(NamedTuple):
    label: str
    dx: int
    dy: int
    dz: int
    family: Family


# Accumulation order shared by every solver: cardinal, diagonal, vertical.
CANONICAL_DIRECTIONS: tuple[Direction, ...] = (
    Direction("-x", -1, 0, 0, Family.X),
    Direction("+x", 1, 0, 0, Family.X),
    Direction("-y", 0, -1, 0, Family.Y),
    Direction("+y", 0, 1, 0, Family.Y),
    Direction("-x-y", -1, -1, 0, Family.D1),
    Direction("+x-y", 1, -1, 0, Family.D2),
    Direction("-x+y", -1, 1, 0, Family.D2),
    Direction("+x+y", 1, 1, 0, Family.D1),
    Direction("-z", 0, 0, -1, Family.Z),
    Direction("+z", 0, 0, 1, Family.Z),
)
DIRECTION_BY_LABEL = {d.label: d for d in CANONICAL_DIRECTIONS}


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    """Base class for malformed mesh or field files."""


class BadMagicError(MeshFormatError):
    pass


class VersionMismatchError(MeshFormatError):
    pass


class TruncatedFileError(MeshFormatError):
    pass


class DimensionOverflowError(MeshFormatError):
    pass


@dataclass(frozen=True)
class MeshDims:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise MeshError(f"{name} must be a positive integer, got {v!r}")
        if self.nx * self.ny * self.nz > MAX_CELLS:
            raise DimensionOverflowError(f"{self} has too many cells")

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        return (self.nz, self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    def flat_index(self, x: int, y: int, z: int) -> int:
        return x + self.nx * (y + self.ny * z)

    def contains(self, x: int, y: int, z: int) -> bool:
        return 0 <= x < self.nx and 0 <= y < self.ny and 0 <= z < self.nz

    def family_shape(self, family: Family) -> tuple[int, int, int]:
        nx, ny, nz = self.nx, self.ny, self.nz
        return {
            Family.X: (nz, ny, nx - 1),
            Family.Y: (nz, ny - 1, nx),
            Family.Z: (nz - 1, ny, nx),
            Family.D1: (nz, ny - 1, nx - 1),
            Family.D2: (nz, ny - 1, nx - 1),
        }[family]

    def family_size(self, family: Family) -> int:
        return int(np.prod(self.family_shape(family)))

    def n_interior_faces(self) -> int:
        return sum(self.family_size(f) for f in Family)


def _as_dims(dims) -> MeshDims:
    if isinstance(dims, MeshDims):
        return dims
    return MeshDims(*(int(v) for v in dims))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=F32)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CellField:
    """One float32 value per cell, stored as an ``(nz, ny, nx)`` array."""

    dims: MeshDims
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=F32)
        if values.size != self.dims.n_cells:
            raise MeshError(f"field has {values.size} values, dims need {self.dims.n_cells}")
        object.__setattr__(self, "values", _readonly(values.reshape(self.dims.shape)))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def bit_equal(self, other: "CellField") -> bool:
        return self.dims == other.dims and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )


@dataclass(frozen=True, eq=False)
class Mesh:
    dims: MeshDims
    elevation: np.ndarray
    trans: dict = field(repr=False)

    def __post_init__(self):
        dims = self.dims
        elev = np.asarray(self.elevation, dtype=F32)
        if elev.size != dims.n_cells:
            raise MeshError("elevation size does not match dims")
        object.__setattr__(self, "elevation", _readonly(elev.reshape(dims.shape)))
        trans = {}
        for fam in Family:
            if fam not in self.trans:
                raise MeshError(f"missing transmissibility family {fam.name}")
            arr = np.asarray(self.trans[fam], dtype=F32)
            shape = dims.family_shape(fam)
            if arr.size != int(np.prod(shape)):
                raise MeshError(f"family {fam.name} has {arr.size} entries, expected {shape}")
            arr = arr.reshape(shape)
            if arr.size and not np.all(arr > 0):
                raise MeshError(f"family {fam.name} has non-positive transmissibility")
            trans[fam] = _readonly(arr)
        object.__setattr__(self, "trans", trans)

    def bit_equal(self, other: "Mesh") -> bool:
        if self.dims != other.dims:
            return False
        pairs = [(self.elevation, other.elevation)]
        pairs += [(self.trans[f], other.trans[f]) for f in Family]
        return all(np.array_equal(a.view(np.uint32), b.view(np.uint32)) for a, b in pairs)


class FaceDescriptor(NamedTuple):
    neighbor: int
    family: Family
    face_index: int
    direction: str


def face_coords(x: int, y: int, z: int, d: Direction) -> tuple[int, int, int]:
    """Family-array coordinates ``(i, j, k)`` of the face from a cell towards ``d``."""
    return (x + min(d.dx, 0), y + min(d.dy, 0), z + min(d.dz, 0))


def neighbor_faces(dims, x: int, y: int, z: int) -> list[FaceDescriptor]:
    """In-bounds faces of cell (x, y, z) in canonical accumulation order."""
    dims = _as_dims(dims)
    if not dims.contains(x, y, z):
        raise IndexError(f"cell ({x}, {y}, {z}) outside mesh {dims}")
    out = []
    for d in CANONICAL_DIRECTIONS:
        lx, ly, lz = x + d.dx, y + d.dy, z + d.dz
        if not dims.contains(lx, ly, lz):
            continue
        i, j, k = face_coords(x, y, z, d)
        fz, fy, fx = dims.family_shape(d.family)
        out.append(
            FaceDescriptor(dims.flat_index(lx, ly, lz), d.family, i + fx * (j + fy * k), d.label)
        )
    return out


@dataclass(frozen=True)
class GeneratorParams:
    """Analytic transmissibility and elevation generator settings."""

    upsilon0: float = 1.0
    a: float = 0.7
    b: float = 1.3
    c: float = 0.4
    family_phase: tuple[float, ...] = (0.0, 1.1, 2.3, 3.7, 5.2)
    dz: float = 1.0

    def __post_init__(self):
        if not self.upsilon0 > 0:
            raise MeshError("upsilon0 must be positive")
        if len(self.family_phase) != len(Family):
            raise MeshError("family_phase needs one entry per face family")


@dataclass(frozen=True)
class FieldParams:
    """Pressure field ``p_ref + A sin(alpha x + beta y + gamma z + delta app)``."""

    p_ref: float = 1.0e7
    amplitude: float = 1.0e5
    alpha: float = 0.3
    beta: float = 0.5
    gamma: float = 0.7
    delta: float = 0.9


def generate_synthetic(dims, params: GeneratorParams | None = None) -> Mesh:
    dims = _as_dims(dims)
    params = params or GeneratorParams()
    k = np.arange(dims.nz, dtype=np.float64)
    elev = np.broadcast_to((-params.dz * k)[:, None, None], dims.shape)
    trans = {}
    for fam in Family:
        nk, nj, ni = dims.family_shape(fam)
        kk, jj, ii = np.meshgrid(np.arange(nk), np.arange(nj), np.arange(ni), indexing="ij")
        arg = params.a * ii + params.b * jj + params.c * kk + params.family_phase[fam]
        trans[fam] = (params.upsilon0 * (1.0 + 0.5 * np.sin(arg))).astype(F32)
    return Mesh(dims, elev.astype(F32), trans)


def pressure_field(dims, app_index: int, params: FieldParams | None = None) -> CellField:
    dims = _as_dims(dims)
    if app_index < 0:
        raise ValueError("app_index must be non-negative")
    params = params or FieldParams()
    zz, yy, xx = np.meshgrid(
        np.arange(dims.nz), np.arange(dims.ny), np.arange(dims.nx), indexing="ij"
    )
    arg = params.alpha * xx + params.beta * yy + params.gamma * zz + params.delta * app_index
    return CellField(dims, (params.p_ref + params.amplitude * np.sin(arg)).astype(F32))


# -- persistence -------------------------------------------------------------


def _open_sink(sink):
    if isinstance(sink, (str, os.PathLike)):
        return open(sink, "wb"), True
    return sink, False


def _read_all(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _write(sink, magic: bytes, dims: MeshDims, arrays) -> None:
    fh, close = _open_sink(sink)
    try:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, dims.nx, dims.ny, dims.nz))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    finally:
        if close:
            fh.close()


def _read_header(buf: bytes, magic: bytes) -> tuple[MeshDims, int]:
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated header")
    _, version, nx, ny, nz = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    if nx * ny * nz > MAX_CELLS:
        raise DimensionOverflowError(f"dimension overflow: {nx}x{ny}x{nz}")
    try:
        dims = MeshDims(nx, ny, nz)
    except MeshError as exc:
        raise MeshFormatError(f"invalid dims in header: {exc}") from None
    return dims, _HEADER.size


def _take(buf: bytes, offset: int, count: int) -> tuple[np.ndarray, int]:
    end = offset + 4 * count
    if end > len(buf):
        raise TruncatedFileError(f"truncated payload: need {end} bytes, have {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(F32), end


def save_mesh(mesh: Mesh, sink: str | os.PathLike | BinaryIO) -> None:
    _write(sink, MESH_MAGIC, mesh.dims, [mesh.elevation] + [mesh.trans[f] for f in Family])


def load_mesh(source) -> Mesh:
    buf = _read_all(source)
    dims, off = _read_header(buf, MESH_MAGIC)
    elev, off = _take(buf, off, dims.n_cells)
    trans = {}
    for fam in Family:
        trans[fam], off = _take(buf, off, dims.family_size(fam))
    if off != len(buf):
        raise MeshFormatError(f"{len(buf) - off} trailing bytes after payload")
    return Mesh(dims, elev, trans)


def save_field(cf: CellField, sink) -> None:
    _write(sink, FIELD_MAGIC, cf.dims, [cf.values])


def load_field(source) -> CellField:
    buf = _read_all(source)
    dims, off = _read_header(buf, FIELD_MAGIC)
    values, off = _take(buf, off, dims.n_cells)
    if off != len(buf):
        raise MeshFormatError(f"{len(buf) - off} trailing bytes after payload")
    return CellField(dims, values)


def mesh_to_bytes(mesh: Mesh) -> bytes:
    buf = io.BytesIO()
    save_mesh(mesh, buf)
    return buf.getvalue()
