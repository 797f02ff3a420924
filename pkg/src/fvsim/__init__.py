"""Finite-volume TPFA flux kernel, cell-based reference solver, and a
message-level simulator of the kernel on a 2D grid of processing elements."""

from .fabric import Fabric, FabricCounters, build_fabric
from .mesh import (
    CellField,
    FieldParams,
    GeneratorParams,
    Mesh,
    MeshDims,
    generate_synthetic,
    load_field,
    load_mesh,
    neighbor_faces,
    pressure_field,
    save_field,
    save_mesh,
)
from .physics import CellState, FluidProps, cell_residual, face_flux, fluid_density
from .reference import Digest, apply, run_applications

__version__ = "0.1.0"
