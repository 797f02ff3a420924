"""scikit-learn style wrappers around the residual kernels.

``fit`` binds a mesh (and, for the fabric backend, builds the PE grid);
``transform`` maps a batch of pressure vectors to residual vectors. Each
sample is one flattened pressure field in x-fastest order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import fabric, reference
from .mesh import CellField, Mesh
from .physics import F32, FluidProps

BACKENDS = ("reference", "fabric")


def check_mesh(mesh) -> Mesh:
    if not isinstance(mesh, Mesh):
        raise TypeError(f"expected a Mesh, got {type(mesh).__name__}")
    return mesh


def check_pressure(X, n_cells: int) -> np.ndarray:
    """Coerce ``X`` to a finite float32 array of shape ``(n_samples, n_cells)``."""
    if isinstance(X, CellField):
        X = X.flat()[None, :]
    X = np.asarray(X, dtype=F32)
    if X.ndim == 1:
        X = X[None, :]
    elif X.ndim > 2:
        X = X.reshape(X.shape[0], -1)
    if X.shape[1] != n_cells:
        raise ValueError(f"X has {X.shape[1]} features per sample, mesh has {n_cells} cells")
    if not np.all(np.isfinite(X)):
        raise ValueError("pressure contains NaN or infinity")
    return X


class FluxResidual(TransformerMixin, BaseEstimator):
    """Pressure-to-flux-residual operator on a fixed mesh.

    Parameters mirror :class:`~fvsim.physics.FluidProps`; ``backend`` picks
    the direct solver or the fabric simulator, which give identical output.
    """

    def __init__(
        self,
        rho_ref=1000.0,
        p_ref=1.0e7,
        c_f=1.0e-9,
        mu=1.0e-3,
        g=9.81,
        backend="reference",
        workers=1,
    ):
        self.rho_ref = rho_ref
        self.p_ref = p_ref
        self.c_f = c_f
        self.mu = mu
        self.g = g
        self.backend = backend
        self.workers = workers

    def _props(self) -> FluidProps:
        return FluidProps(self.rho_ref, self.p_ref, self.c_f, self.mu, self.g)

    def fit(self, X, y=None):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        self.mesh_ = check_mesh(X)
        self.props_ = self._props()
        self.n_features_in_ = self.mesh_.dims.n_cells
        self.fabric_ = (
            fabric.build_fabric(self.mesh_, self.props_, workers=self.workers)
            if self.backend == "fabric"
            else None
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "mesh_")
        X = check_pressure(X, self.n_features_in_)
        dims = self.mesh_.dims
        out = np.empty_like(X)
        for i, row in enumerate(X):
            p = CellField(dims, row)
            if self.fabric_ is None:
                r = reference.apply(self.mesh_, p, self.props_, self.workers)
            else:
                r = self.fabric_.run_application(i, pressure=p)
            out[i] = r.flat()
        return out

    def fit_transform(self, X, y=None, **fit_params):
        raise TypeError("fit takes a Mesh and transform takes pressures; call them separately")
