"""Direct cell-based residual assembly over the whole mesh.

This is the oracle the fabric simulator is checked against. ``apply`` is
vectorised over cells (one array expression per canonical direction);
``apply_cellwise`` is the literal double loop, kept as a slow second route.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .mesh import (
    CANONICAL_DIRECTIONS,
    CellField,
    FieldParams,
    Mesh,
    MeshError,
    neighbor_faces,
    pressure_field,
)
from .physics import F32, CellState, FluidProps, cell_residual, face_flux, fluid_density

ResidualField = CellField


@dataclass(frozen=True)
class Digest:
    """Compact fingerprint of one residual field."""

    sum: float
    l2: float
    checksum: str

    @classmethod
    def of(cls, field: CellField) -> "Digest":
        v = field.flat().astype(np.float64)
        raw = np.ascontiguousarray(field.flat(), dtype="<f4").tobytes()
        return cls(float(v.sum()), float(np.sqrt(np.dot(v, v))), hashlib.sha256(raw).hexdigest())

    def to_dict(self) -> dict:
        return asdict(self)


def _check_dims(mesh: Mesh, pressure: CellField) -> None:
    if pressure.dims != mesh.dims:
        raise MeshError(f"pressure dims {pressure.dims} do not match mesh dims {mesh.dims}")


def _axis_slice(n: int, step: int) -> slice:
    # cells whose neighbour at offset `step` lies inside [0, n)
    return slice(1, n) if step < 0 else slice(0, n - 1) if step > 0 else slice(0, n)


class _Stencil:
    """Per-direction padded operands shared by all z-slabs."""

    def __init__(self, mesh: Mesh, pressure: CellField, props: FluidProps):
        d = mesh.dims
        self.dims = d
        self.props = props
        p = pressure.values
        z = mesh.elevation
        rho = fluid_density(p.reshape(-1), props).reshape(d.shape)
        self.p, self.z, self.rho = p, z, rho
        self.pp = np.pad(p, 1, mode="edge")
        self.zp = np.pad(z, 1, mode="edge")
        self.rhop = np.pad(rho, 1, mode="edge")
        self.ups = []
        self.mask = []
        for dr in CANONICAL_DIRECTIONS:
            region = (
                _axis_slice(d.nz, dr.dz),
                _axis_slice(d.ny, dr.dy),
                _axis_slice(d.nx, dr.dx),
            )
            ups = np.zeros(d.shape, dtype=F32)
            mask = np.zeros(d.shape, dtype=bool)
            ups[region] = mesh.trans[dr.family]
            mask[region] = True
            self.ups.append(ups)
            self.mask.append(mask)

    def slab(self, k0: int, k1: int) -> np.ndarray:
        d = self.dims
        K = CellState(self.p[k0:k1], self.z[k0:k1])
        rho_K = self.rho[k0:k1]
        acc = np.zeros((k1 - k0, d.ny, d.nx), dtype=F32)
        for idx, dr in enumerate(CANONICAL_DIRECTIONS):
            sl = (
                slice(1 + k0 + dr.dz, 1 + k1 + dr.dz),
                slice(1 + dr.dy, 1 + dr.dy + d.ny),
                slice(1 + dr.dx, 1 + dr.dx + d.nx),
            )
            L = CellState(self.pp[sl], self.zp[sl])
            flux = face_flux(self.ups[idx][k0:k1], K, L, self.props, rho_K, self.rhop[sl])
            acc = np.where(self.mask[idx][k0:k1], acc + flux, acc)
        return acc


def apply(mesh: Mesh, pressure: CellField, props: FluidProps, workers: int = 1) -> CellField:
    """Flux residual of every cell; bit-identical for any ``workers``."""
    _check_dims(mesh, pressure)
    st = _Stencil(mesh, pressure, props)
    nz = mesh.dims.nz
    workers = max(1, min(int(workers), nz))
    if workers == 1:
        return CellField(mesh.dims, st.slab(0, nz))
    bounds = np.linspace(0, nz, workers + 1).astype(int)
    out = np.empty(mesh.dims.shape, dtype=F32)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = pool.map(lambda b: st.slab(*b), zip(bounds[:-1], bounds[1:]))
        for k0, chunk in zip(bounds[:-1], chunks):
            out[k0 : k0 + chunk.shape[0]] = chunk
    return CellField(mesh.dims, out)


def apply_cellwise(mesh: Mesh, pressure: CellField, props: FluidProps) -> CellField:
    """Literal per-cell, per-neighbour loop. Slow; for cross-checking only."""
    _check_dims(mesh, pressure)
    d = mesh.dims
    p = pressure.flat()
    z = mesh.elevation.reshape(-1)
    trans = {f: a.reshape(-1) for f, a in mesh.trans.items()}
    out = np.zeros(d.n_cells, dtype=F32)
    for k in range(d.nz):
        for j in range(d.ny):
            for i in range(d.nx):
                c = d.flat_index(i, j, k)
                faces = [
                    (trans[fd.family][fd.face_index], CellState(p[fd.neighbor], z[fd.neighbor]))
                    for fd in neighbor_faces(d, i, j, k)
                ]
                out[c] = cell_residual(CellState(p[c], z[c]), faces, props)
    return CellField(d, out)


def run_applications(
    mesh: Mesh,
    props: FluidProps,
    n_apps: int,
    field_params: FieldParams | None = None,
    workers: int = 1,
    keep_fields: bool = False,
):
    """Apply the kernel ``n_apps`` times, each with a fresh pressure field.

    Returns a list of :class:`Digest`, or of ``(Digest, CellField)`` pairs
    when ``keep_fields`` is set.
    """
    if n_apps < 1:
        raise ValueError("n_apps must be >= 1")
    out = []
    for app in range(n_apps):
        res = apply(mesh, pressure_field(mesh.dims, app, field_params), props, workers)
        out.append((Digest.of(res), res) if keep_fields else Digest.of(res))
    return out


def face_flux_between(mesh: Mesh, pressure: CellField, props: FluidProps, a: int, b: int):
    """Flux from flat cell ``a`` into flat cell ``b``; for hand checks."""
    d = mesh.dims
    x, y, z = a % d.nx, (a // d.nx) % d.ny, a // (d.nx * d.ny)
    for fd in neighbor_faces(d, x, y, z):
        if fd.neighbor == b:
            ups = mesh.trans[fd.family].reshape(-1)[fd.face_index]
            p, zz = pressure.flat(), mesh.elevation.reshape(-1)
            return face_flux(ups, CellState(p[a], zz[a]), CellState(p[b], zz[b]), props)
    raise MeshError(f"cells {a} and {b} share no face")
