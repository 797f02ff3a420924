"""TPFA flux kernel: density, potential difference, upwinding, face flux.

Every function works on scalars or on numpy arrays (broadcasting), and all
arithmetic is carried out in float32 with a fixed operation order so that
two callers evaluating the same face on different array shapes get
bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

F32 = np.float32
_HALF = F32(0.5)


@dataclass(frozen=True)
class FluidProps:
    """Global fluid constants (SI units)."""

    rho_ref: float = 1000.0
    p_ref: float = 1.0e7
    c_f: float = 1.0e-9
    mu: float = 1.0e-3
    g: float = 9.81

    def __post_init__(self):
        for name in ("rho_ref", "p_ref", "c_f", "mu", "g"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.rho_ref <= 0:
            raise ValueError("rho_ref must be positive")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.c_f < 0:
            raise ValueError("c_f must be non-negative")
        if self.g < 0:
            raise ValueError("g must be non-negative")


class CellState(NamedTuple):
    """Pressure and cell-center elevation; either field may be an array."""

    p: np.ndarray | float
    z: np.ndarray | float


def _f32(x):
    return np.asarray(x, dtype=F32)


def _out(x):
    # 0-d arrays become numpy scalars
    return x[()] if isinstance(x, np.ndarray) and x.ndim == 0 else x


def fluid_density(p, props: FluidProps):
    """Slightly compressible density ``rho_ref * exp(c_f * (p - p_ref))``."""
    p = _f32(p)
    if p.ndim:
        p = np.ascontiguousarray(p)
    expo = F32(props.c_f) * (p - F32(props.p_ref))
    return _out(F32(props.rho_ref) * np.exp(expo))


def potential_difference(K: CellState, L: CellState, rho_K, rho_L, g):
    """Potential drop from K to L: pressure difference plus gravity head."""
    dp = _f32(L.p) - _f32(K.p)
    dz = _f32(L.z) - _f32(K.z)
    rho_avg = _HALF * (_f32(rho_K) + _f32(rho_L))
    return _out(dp + (rho_avg * F32(g)) * dz)


def upwind_mobility(dphi, rho_K, rho_L, mu):
    """``rho_K / mu`` where ``dphi > 0``, else ``rho_L / mu`` (ties go to L)."""
    rho = np.where(_f32(dphi) > 0, _f32(rho_K), _f32(rho_L))
    return _out(rho / F32(mu))


def face_flux(ups, K: CellState, L: CellState, props: FluidProps, rho_K=None, rho_L=None):
    """Flux ``ups * lambda_upw * dphi`` across the face between K and L.

    Densities may be passed in when the caller has them cached; otherwise
    they are evaluated from the cell pressures.
    """
    if rho_K is None:
        rho_K = fluid_density(K.p, props)
    if rho_L is None:
        rho_L = fluid_density(L.p, props)
    dphi = potential_difference(K, L, rho_K, rho_L, props.g)
    lam = upwind_mobility(dphi, rho_K, rho_L, props.mu)
    return _out((_f32(ups) * lam) * dphi)


def cell_residual(K: CellState, faces: Iterable[tuple], props: FluidProps):
    """Sum the fluxes of ``faces`` into cell K, strictly left to right.

    ``faces`` is an ordered iterable of ``(ups, L)`` pairs. The sum is
    sequential float32 accumulation starting from zero; it must not be
    reordered, since bit-exact agreement between solvers depends on it.
    """
    acc = np.zeros(np.shape(K.p), dtype=F32)
    for ups, L in faces:
        acc = acc + face_flux(ups, K, L, props)
    return _out(acc)
