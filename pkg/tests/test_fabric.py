import logging

import numpy as np
import pytest

from fvsim.fabric import (
    CARDINAL_FACE,
    DIAGONAL_FACE,
    RECEIVING,
    SENDING,
    Color,
    DeadlockError,
    Link,
    PeId,
    analytic_word_counts,
    build_fabric,
    diagonal_intermediary,
)
from fvsim.mesh import (
    CANONICAL_DIRECTIONS,
    FieldParams,
    GeneratorParams,
    generate_synthetic,
    neighbor_faces,
    pressure_field,
)
from fvsim.physics import FluidProps
from fvsim.reference import Digest, apply

PROPS = FluidProps()
HORIZONTAL = [d for d in CANONICAL_DIRECTIONS if d.dz == 0]


def make(dims, **kw):
    m = generate_synthetic(dims)
    return m, build_fabric(m, PROPS, **kw)


def in_plane_neighbors(nx, ny, x, y, offsets):
    return [(dx, dy) for dx, dy in offsets if 0 <= x + dx < nx and 0 <= y + dy < ny]


CARD = [(1, 0), (-1, 0), (0, 1), (0, -1)]
DIAG = [(1, 1), (1, -1), (-1, 1), (-1, -1)]


def brute_force_words(nx, ny, nz):
    card = sum(len(in_plane_neighbors(nx, ny, x, y, CARD)) for x in range(nx) for y in range(ny))
    diag = sum(len(in_plane_neighbors(nx, ny, x, y, DIAG)) for x in range(nx) for y in range(ny))
    return 2 * nz * card, 2 * nz * diag


class TestBuild:
    def test_counts(self):
        _, f = make((4, 3, 5))
        assert len(f.pes) == 12
        assert all(pe.nz == 5 and pe.pressure.shape == (5,) for pe in f.pes.values())

    def test_degenerate(self):
        m, f = make((1, 1, 5))
        res = f.run_application(0)
        assert f.counters().words_received == 0
        assert res.bit_equal(apply(m, pressure_field(m.dims, 0), PROPS))

    def test_transmissibility_views(self):
        _, f = make((4, 4, 3))
        for (x, y), pe in f.pes.items():
            expected = neighbor_faces((4, 4, 3), x, y, 1)
            assert sorted(pe.ups) == sorted(fd.direction for fd in expected)
        assert len(f.pes[PeId(1, 1)].ups) == 10
        assert len(f.pes[PeId(0, 0)].ups) == 5

    def test_views_follow_face_storage(self):
        m, f = make((3, 3, 2))
        pe = f.pes[PeId(1, 1)]
        for fd in neighbor_faces(m.dims, 1, 1, 0):
            if fd.direction in ("-z", "+z"):
                continue
            flat = m.trans[fd.family].reshape(-1)
            assert pe.ups[fd.direction][0] == flat[fd.face_index]


class TestCardinal:
    def test_buffers_full_after_two_steps(self):
        _, f = make((3, 3, 4))
        f.load(0)
        f.cardinal_exchange()
        centre = f.pes[PeId(1, 1)]
        assert set(CARDINAL_FACE.values()) <= centre.filled
        for pe in f.pes.values():
            for port in pe.cardinal_ports():
                assert CARDINAL_FACE[port] in pe.filled

    def test_single_row_only_east_west(self):
        _, f = make((6, 1, 3))
        f.run_application(0)
        for pe in f.pes.values():
            assert pe.filled <= {"-x", "+x"}
        _, f = make((1, 6, 3))
        f.run_application(0)
        for pe in f.pes.values():
            assert pe.filled <= {"-y", "+y"}

    @pytest.mark.parametrize("nx,ny,nz", [(1, 1, 2), (2, 3, 4), (5, 5, 1), (7, 4, 3)])
    def test_cardinal_word_count(self, nx, ny, nz):
        _, f = make((nx, ny, nz))
        f.load(0)
        f.cardinal_exchange()
        expected = 2 * nz * (2 * ((nx - 1) * ny + nx * (ny - 1)))
        assert f.counters().words_received == expected == brute_force_words(nx, ny, nz)[0]

    def test_router_alternation(self):
        _, f = make((4, 5, 2))
        f.run_application(0)
        for pe in f.pes.values():
            assert sorted(pe.router.trace) == [SENDING, RECEIVING]

    def test_switch_commands_counted_apart(self):
        _, f = make((3, 3, 2))
        f.run_application(0)
        c = f.counters()
        # each PE once as sender: one ramp command plus one per fabric link
        links = sum(len(pe.cardinal_ports()) for pe in f.pes.values())
        assert c.control_messages == len(f.pes) + links
        assert c.words_received == analytic_word_counts(3, 3, 2)["total"]


class TestDiagonal:
    def test_centre_gets_four_two_hop_payloads(self):
        _, f = make((3, 3, 2))
        f.run_application(0)
        log = f.pes[PeId(1, 1)].diagonal_log
        assert len(log) == 4
        assert all(d.hops == 2 for d in log)
        for d in log:
            assert d.via == diagonal_intermediary(PeId(1, 1), d.face)

    def test_corner_gets_one(self):
        _, f = make((4, 4, 2))
        f.run_application(0)
        log = f.pes[PeId(0, 0)].diagonal_log
        assert [(d.face, d.origin) for d in log] == [("+x+y", PeId(1, 1))]

    def test_origin_matches_face(self):
        _, f = make((5, 4, 1))
        f.run_application(0)
        for pid, pe in f.pes.items():
            for d in pe.diagonal_log:
                step = next(c for c in HORIZONTAL if c.label == d.face)
                assert d.origin == PeId(pid.px + step.dx, pid.py + step.dy)

    def test_interior_receives_sixteen_words_per_cell(self):
        _, f = make((5, 5, 3))
        f.run_application(0)
        assert f.pes[PeId(2, 2)].counters.words_received == 16 * 3

    def test_diagonal_buffers_full(self):
        _, f = make((4, 3, 2))
        f.run_application(1)
        for (x, y), pe in f.pes.items():
            want = {DIAGONAL_FACE[p] for p in pe.diagonal_ports()}
            assert len(want) == len(in_plane_neighbors(4, 3, x, y, DIAG))
            assert want <= pe.filled


class TestRun:
    @pytest.mark.parametrize("dims", [(1, 1, 1), (2, 1, 1), (1, 5, 3), (3, 3, 3), (6, 4, 5), (8, 8, 8)])
    def test_oracle_equivalence(self, dims):
        m, f = make(dims)
        for app in range(3):
            assert f.run_application(app).bit_equal(apply(m, pressure_field(m.dims, app), PROPS))

    def test_uniform_state(self):
        m = generate_synthetic((4, 4, 3), GeneratorParams(dz=0.0))
        fp = FieldParams(amplitude=0.0)
        f = build_fabric(m, PROPS)
        res = f.run_application(0, fp)
        assert np.all(res.values == 0)
        c_flat = f.counters().traffic()
        f.reset_counters()
        f.run_application(0)
        assert f.counters().traffic() == c_flat

    def test_vertical_chain(self):
        m, f = make((1, 1, 6))
        res = f.run_application(2)
        assert f.counters().words_sent == 0
        assert res.bit_equal(apply(m, pressure_field(m.dims, 2), PROPS))

    def test_counters_linear(self):
        _, f = make((4, 3, 2))
        one = f.run_applications(1).counters
        two = f.run_applications(2).counters
        assert two.words_received == 2 * one.words_received
        assert two.words_forwarded == 2 * one.words_forwarded
        assert two.flops == 2 * one.flops

    def test_comm_only(self):
        _, f = make((5, 4, 3))
        full = f.run_applications(2).counters
        comm = f.run_applications(2, comm_only=True)
        assert comm.digests is None
        assert comm.counters.flops == 0 and full.flops > 0
        assert comm.counters.traffic() == full.traffic()

    def test_words_conserved(self):
        _, f = make((6, 5, 2))
        c = f.run_applications(2).counters
        assert c.words_sent + c.words_forwarded == c.words_received

    def test_flops_interior(self):
        _, f = make((3, 3, 3))
        f.run_application(0)
        # every face of every cell, 14 FLOPs each
        faces = sum(len(neighbor_faces((3, 3, 3), x, y, z)) for x in range(3) for y in range(3) for z in range(3))
        assert f.counters().flops == 14 * faces

    @pytest.mark.parametrize("workers", [2, 8])
    def test_workers(self, workers):
        _, f1 = make((6, 5, 3))
        _, fw = make((6, 5, 3), workers=workers)
        a, b = f1.run_applications(3), fw.run_applications(3)
        assert a.digests == b.digests
        assert a.counters.to_dict() == b.counters.to_dict()

    def test_keep_last(self):
        m, f = make((3, 2, 2))
        run = f.run_applications(2, keep_last=True)
        assert run.digests[-1] == Digest.of(run.residual)


class TestDiagnostics:
    def test_severed_link_deadlocks(self):
        _, f = make((3, 3, 2))
        f.sever(PeId(0, 1), Link.EAST)
        with pytest.raises(DeadlockError) as exc:
            f.run_application(0)
        err = exc.value
        assert err.pe == PeId(1, 1) and err.color == Color.CARDINAL and err.port == Link.WEST
        assert "(1, 1)" in str(err) and "CARDINAL" in str(err)

    def test_severed_relay_deadlocks(self):
        # (1, 0) relays its west block south to (1, 1) in the relay phase only
        _, f = make((3, 3, 2))
        f.load(0)
        f.cardinal_exchange()
        f.sever(PeId(1, 0), Link.SOUTH)
        with pytest.raises(DeadlockError) as exc:
            f.diagonal_exchange()
        assert exc.value.color == Color.RELAY and exc.value.pe == PeId(1, 1)

    def test_memory_budget_is_a_warning(self, caplog):
        m = generate_synthetic((2, 2, 40))
        with caplog.at_level(logging.WARNING):
            f = build_fabric(m, PROPS, memory_budget=1024)
        assert f.memory_over_budget()
        assert "memory budget" in caplog.text
        assert f.run_application(0) is not None

    def test_default_budget(self):
        _, f = make((3, 3, 8))
        assert not f.memory_over_budget()


@pytest.mark.parametrize("nx,ny,nz", [(1, 1, 3), (2, 2, 1), (3, 5, 2), (6, 6, 4)])
def test_analytic_counts_vs_brute_force(nx, ny, nz):
    c = analytic_word_counts(nx, ny, nz)
    assert (c["cardinal"], c["diagonal"]) == brute_force_words(nx, ny, nz)
