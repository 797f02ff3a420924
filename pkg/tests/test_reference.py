import numpy as np
import pytest

from fvsim.mesh import (
    CellField,
    Family,
    FieldParams,
    GeneratorParams,
    MeshDims,
    MeshError,
    generate_synthetic,
    pressure_field,
)
from fvsim.physics import CellState, FluidProps, face_flux
from fvsim.reference import Digest, apply, apply_cellwise, face_flux_between, run_applications

PROPS = FluidProps()


def test_uniform_state_gives_zero():
    m = generate_synthetic((4, 4, 3), GeneratorParams(dz=0.0))
    p = pressure_field(m.dims, 0, FieldParams(amplitude=0.0))
    assert np.all(apply(m, p, PROPS).values == 0)


def test_two_cells_hand_oracle():
    m = generate_synthetic((2, 1, 1))
    p = CellField(m.dims, np.array([1.01e7, 0.995e7], dtype=np.float32))
    ups = m.trans[Family.X][0, 0, 0]
    f01 = face_flux(ups, CellState(p.flat()[0], 0.0), CellState(p.flat()[1], 0.0), PROPS)
    r = apply(m, p, PROPS).flat()
    assert r[0] == f01
    assert r[1] == -f01
    assert face_flux_between(m, p, PROPS, 0, 1) == f01


def test_single_cell():
    m = generate_synthetic((1, 1, 1))
    assert apply(m, pressure_field(m.dims, 3), PROPS).flat().tolist() == [0.0]


def test_dims_mismatch():
    m = generate_synthetic((2, 2, 2))
    with pytest.raises(MeshError):
        apply(m, pressure_field((2, 2, 3), 0), PROPS)


@pytest.mark.parametrize("dims", [(1, 1, 4), (3, 1, 1), (1, 4, 2), (3, 3, 3), (5, 4, 3), (2, 6, 1)])
def test_vectorised_matches_cellwise(dims):
    m = generate_synthetic(dims, GeneratorParams(a=0.37, c=1.1))
    for app in (0, 5):
        p = pressure_field(m.dims, app)
        assert apply(m, p, PROPS).bit_equal(apply_cellwise(m, p, PROPS))


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_workers_invariant(workers):
    m = generate_synthetic((6, 5, 7))
    p = pressure_field(m.dims, 2)
    assert apply(m, p, PROPS, workers=workers).bit_equal(apply(m, p, PROPS))


def test_conservation():
    m = generate_synthetic((20, 18, 9))
    r = apply(m, pressure_field(m.dims, 4), PROPS).flat().astype(np.float64)
    assert abs(r.sum()) <= 1e-5 * np.abs(r).sum()


def test_locality():
    m = generate_synthetic((5, 5, 5))
    p = pressure_field(m.dims, 0)
    base = apply(m, p, PROPS).values
    bumped = p.values.copy()
    bumped[2, 2, 2] += np.float32(5e4)
    changed = np.argwhere(apply(m, CellField(m.dims, bumped), PROPS).values != base)
    assert 1 <= len(changed) <= 11
    offsets = {tuple(c - np.array([2, 2, 2])) for c in changed}
    allowed = {(0, 0, 0), (0, 0, -1), (0, 0, 1), (0, -1, 0), (0, 1, 0), (0, 0, 1), (0, -1, -1),
               (0, -1, 1), (0, 1, -1), (0, 1, 1), (-1, 0, 0), (1, 0, 0)}
    assert offsets <= allowed


class TestRunApplications:
    mesh = generate_synthetic((4, 3, 3))

    def test_single(self):
        (d,) = run_applications(self.mesh, PROPS, 1)
        assert d == Digest.of(apply(self.mesh, pressure_field(self.mesh.dims, 0), PROPS))

    def test_static_field_repeats(self):
        ds = run_applications(self.mesh, PROPS, 3, FieldParams(delta=0.0))
        assert ds[0] == ds[1] == ds[2]

    def test_distinct_fields(self):
        pairs = run_applications(self.mesh, PROPS, 2, keep_fields=True)
        p0, p1 = (pressure_field(self.mesh.dims, i) for i in range(2))
        assert not p0.bit_equal(p1)
        assert pairs[0][0] != pairs[1][0]
        assert not pairs[0][1].bit_equal(pairs[1][1])

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            run_applications(self.mesh, PROPS, 0)


def test_digest_fields():
    f = CellField(MeshDims(2, 1, 1), np.array([3.0, -4.0], dtype=np.float32))
    d = Digest.of(f)
    assert d.sum == -1.0 and d.l2 == 5.0 and len(d.checksum) == 64
