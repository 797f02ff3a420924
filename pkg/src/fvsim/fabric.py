"""Message-level simulation of the PE fabric running the flux kernel.

Each PE owns one Z-column of the mesh. Per application, a PE

1. loads its pressure column and caches its densities,
2. takes part in two cardinal broadcast steps: PEs whose router sits in the
   sending position broadcast ``(pressure, elevation)`` for their column on
   every link, then issue a switch command that flips their own router and
   their neighbours' routers,
3. forwards every cardinal block it received one more hop (clockwise: data
   from the west goes south, north goes west, east goes north, south goes
   east), which delivers each diagonal neighbour's block to the target,
4. computes the two vertical fluxes locally and sums its per-face slots in
   the canonical order.

Fluxes are computed as soon as a block lands, into per-face slots; the sum is
taken only after all arrivals. That keeps the result independent of arrival
order and bit-identical to the reference solver.

The model is untimed. Phase barriers separate protocol steps, and within a
phase PEs may run on a thread pool; message delivery happens at the barrier
in a fixed order, so counters and results never depend on scheduling.
"""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, NamedTuple

import numpy as np

from .mesh import (
    CANONICAL_DIRECTIONS,
    DIRECTION_BY_LABEL,
    CellField,
    FieldParams,
    Mesh,
    MeshError,
    pressure_field,
)
from .physics import F32, CellState, FluidProps, face_flux, fluid_density
from .reference import Digest

log = logging.getLogger(__name__)

FLOPS_PER_FACE = 14
DEFAULT_MEMORY_BUDGET = 48 * 1024


class Link(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3
    RAMP = 4


FABRIC_LINKS = (Link.NORTH, Link.EAST, Link.SOUTH, Link.WEST)

# North is y - 1, as on the fabric.
LINK_STEP = {Link.NORTH: (0, -1), Link.EAST: (1, 0), Link.SOUTH: (0, 1), Link.WEST: (-1, 0)}
OPPOSITE = {Link.NORTH: Link.SOUTH, Link.SOUTH: Link.NORTH, Link.EAST: Link.WEST, Link.WEST: Link.EAST}

# arrival port -> face label, cardinal data
CARDINAL_FACE = {Link.WEST: "-x", Link.EAST: "+x", Link.NORTH: "-y", Link.SOUTH: "+y"}
# intermediary: arrival port of cardinal data -> link it is relayed on
RELAY_OUT = {Link.WEST: Link.SOUTH, Link.NORTH: Link.WEST, Link.EAST: Link.NORTH, Link.SOUTH: Link.EAST}
# target: arrival port of relayed data -> diagonal face label
DIAGONAL_FACE = {Link.NORTH: "-x-y", Link.EAST: "+x-y", Link.SOUTH: "+x+y", Link.WEST: "-x+y"}
DIAGONAL_PORT = {label: port for port, label in DIAGONAL_FACE.items()}

SENDING, RECEIVING = 0, 1


class Color(IntEnum):
    CARDINAL = 0
    RELAY = 1
    SWITCH = 2


class FabricError(RuntimeError):
    pass


class DeadlockError(FabricError):
    """A PE waits for a message that can never arrive."""

    def __init__(self, pe: "PeId", color: Color, port: Link, phase: str):
        self.pe, self.color, self.port, self.phase = pe, color, port, phase
        super().__init__(
            f"deadlock in {phase}: PE ({pe.px}, {pe.py}) waits on color {color.name} "
            f"from {port.name}, which can never arrive"
        )


class ProtocolError(FabricError):
    pass


class PeId(NamedTuple):
    px: int
    py: int


@dataclass
class Message:
    color: Color
    payload: np.ndarray
    origin: PeId
    link: Link  # direction of travel of the current hop
    hops: int = 0
    via: PeId | None = None

    def __post_init__(self):
        if self.payload.size == 0:
            raise ProtocolError("data messages carry at least one word")


@dataclass
class SwitchCommand:
    origin: PeId
    link: Link
    color: Color = Color.SWITCH


@dataclass
class RouterConfig:
    position: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def flip(self, color: Color) -> None:
        self.position[color] = 1 - self.position[color]


@dataclass
class FabricCounters:
    words_sent: int = 0
    words_received: int = 0
    words_forwarded: int = 0
    hops_total: int = 0
    control_messages: int = 0
    flops: int = 0
    messages_per_phase: Counter = field(default_factory=Counter)

    def __iadd__(self, other: "FabricCounters"):
        self.words_sent += other.words_sent
        self.words_received += other.words_received
        self.words_forwarded += other.words_forwarded
        self.hops_total += other.hops_total
        self.control_messages += other.control_messages
        self.flops += other.flops
        self.messages_per_phase.update(other.messages_per_phase)
        return self

    def traffic(self) -> dict:
        """Word and message counts only (FLOPs excluded)."""
        d = self.to_dict()
        d.pop("flops")
        return d

    def to_dict(self) -> dict:
        return {
            "words_sent": self.words_sent,
            "words_received": self.words_received,
            "words_forwarded": self.words_forwarded,
            "hops_total": self.hops_total,
            "control_messages": self.control_messages,
            "flops": self.flops,
            "messages_per_phase": dict(sorted(self.messages_per_phase.items())),
        }


class DiagonalDelivery(NamedTuple):
    face: str
    origin: PeId
    via: PeId
    hops: int


class PE:
    """State machine for one processing element and its Z-column."""

    def __init__(self, pid: PeId, mesh: Mesh, props: FluidProps):
        d = mesh.dims
        x, y = pid
        self.pid = pid
        self.nz = d.nz
        self.props = props
        self.neighbors: dict[Link, PeId | None] = {}
        for link, (sx, sy) in LINK_STEP.items():
            nx_, ny_ = x + sx, y + sy
            inside = 0 <= nx_ < d.nx and 0 <= ny_ < d.ny
            self.neighbors[link] = PeId(nx_, ny_) if inside else None

        self.elevation = np.ascontiguousarray(mesh.elevation[:, y, x])
        # per-face transmissibility views, derived from face storage
        self.ups: dict[str, np.ndarray] = {}
        for dr in CANONICAL_DIRECTIONS:
            fam = mesh.trans[dr.family]
            if dr.dz:
                if d.nz > 1:
                    self.ups[dr.label] = np.ascontiguousarray(fam[:, y, x])
                continue
            lx, ly = x + dr.dx, y + dr.dy
            if 0 <= lx < d.nx and 0 <= ly < d.ny:
                self.ups[dr.label] = np.ascontiguousarray(fam[:, y + min(dr.dy, 0), x + min(dr.dx, 0)])

        nz = d.nz
        self.pressure = np.zeros(nz, dtype=F32)
        self.density = np.zeros(nz, dtype=F32)
        self.residual = np.zeros(nz, dtype=F32)
        self.recv = {lab: np.zeros((2, nz), dtype=F32) for lab in CARDINAL_FACE.values()}
        self.recv.update({lab: np.zeros((2, nz), dtype=F32) for lab in DIAGONAL_FACE.values()})
        self.slots = {dr.label: np.zeros(nz, dtype=F32) for dr in CANONICAL_DIRECTIONS}
        self.filled: set[str] = set()
        self.router = RouterConfig({Color.CARDINAL: SENDING if (x + y) % 2 == 0 else RECEIVING})
        self.counters = FabricCounters()
        self.inbox: dict[tuple[Color, Link], Message] = {}
        self.switches: list[SwitchCommand] = []
        self.outbox: list[tuple[Link, Message | SwitchCommand]] = []
        self.cardinal_in: dict[Link, Message] = {}
        self.diagonal_log: list[DiagonalDelivery] = []
        self.comm_only = False

    # -- topology ----------------------------------------------------------

    def has_face(self, label: str) -> bool:
        dr = DIRECTION_BY_LABEL[label]
        if dr.dz:
            return self.nz > 1
        return label in self.ups

    def cardinal_ports(self) -> list[Link]:
        return [l for l in FABRIC_LINKS if self.neighbors[l] is not None]

    def diagonal_ports(self) -> list[Link]:
        return [DIAGONAL_PORT[lab] for lab in DIAGONAL_FACE.values() if lab in self.ups]

    def memory_bytes(self) -> int:
        arrays = [self.pressure, self.density, self.residual, self.elevation]
        arrays += list(self.ups.values()) + list(self.recv.values()) + list(self.slots.values())
        return sum(a.nbytes for a in arrays)

    # -- protocol steps ----------------------------------------------------

    def post(self, link: Link, msg) -> None:
        self.outbox.append((link, msg))

    def load(self, pressure: np.ndarray, comm_only: bool) -> None:
        x, y = self.pid
        self.comm_only = comm_only
        self.pressure[:] = pressure[:, y, x]
        if not comm_only:
            self.density[:] = fluid_density(self.pressure, self.props)
        self.residual[:] = 0
        for s in self.slots.values():
            s[:] = 0
        for b in self.recv.values():
            b[:] = 0
        self.filled.clear()
        self.cardinal_in.clear()
        self.diagonal_log.clear()
        self.router.position[Color.CARDINAL] = SENDING if (x + y) % 2 == 0 else RECEIVING
        self.router.trace.clear()

    def broadcast(self) -> None:
        pos = self.router.position[Color.CARDINAL]
        self.router.trace.append(pos)
        if pos != SENDING:
            return
        block = np.concatenate([self.pressure, self.elevation])
        for link in self.cardinal_ports():
            self.post(link, Message(Color.CARDINAL, block, self.pid, link))
            self.counters.words_sent += block.size
            self.counters.messages_per_phase["cardinal"] += 1
        # switch self (over the ramp) and every neighbour
        self.post(Link.RAMP, SwitchCommand(self.pid, Link.RAMP))
        for link in self.cardinal_ports():
            self.post(link, SwitchCommand(self.pid, link))
        self.counters.control_messages += 1 + len(self.cardinal_ports())

    def receive_cardinal(self, step: int) -> None:
        if self.router.trace[-1] == RECEIVING:
            for port in self.cardinal_ports():
                msg = self.inbox.pop((Color.CARDINAL, port), None)
                if msg is None:
                    raise DeadlockError(self.pid, Color.CARDINAL, port, f"cardinal step {step}")
                self.cardinal_in[port] = msg
                self._land(CARDINAL_FACE[port], msg)
        if self.switches:
            self.router.flip(Color.CARDINAL)
            self.switches.clear()

    def relay(self) -> None:
        for port, msg in sorted(self.cardinal_in.items()):
            out = RELAY_OUT[port]
            if self.neighbors[out] is None:
                continue
            fwd = Message(Color.RELAY, msg.payload, msg.origin, out, hops=msg.hops, via=self.pid)
            self.post(out, fwd)
            self.counters.words_forwarded += msg.payload.size
            self.counters.messages_per_phase["relay"] += 1

    def receive_diagonal(self) -> None:
        for port in self.diagonal_ports():
            msg = self.inbox.pop((Color.RELAY, port), None)
            if msg is None:
                raise DeadlockError(self.pid, Color.RELAY, port, "diagonal relay")
            label = DIAGONAL_FACE[port]
            self.diagonal_log.append(DiagonalDelivery(label, msg.origin, msg.via, msg.hops))
            self._land(label, msg)

    def _land(self, label: str, msg: Message) -> None:
        buf = self.recv[label]
        buf[:] = msg.payload.reshape(2, self.nz)
        self.filled.add(label)
        if self.comm_only:
            return
        K = CellState(self.pressure, self.elevation)
        L = CellState(buf[0], buf[1])
        # neighbour density from the received pressure; only p and z travel
        rho_L = fluid_density(buf[0], self.props)
        self.slots[label][:] = face_flux(self.ups[label], K, L, self.props, self.density, rho_L)
        self.counters.flops += FLOPS_PER_FACE * self.nz

    def finish(self) -> None:
        if self.comm_only:
            return
        nz = self.nz
        if nz > 1:
            p, z, rho = self.pressure, self.elevation, self.density
            lower = CellState(p[:-1], z[:-1])
            upper = CellState(p[1:], z[1:])
            ups = self.ups["-z"]
            self.slots["-z"][1:] = face_flux(ups, upper, lower, self.props, rho[1:], rho[:-1])
            self.slots["+z"][:-1] = face_flux(ups, lower, upper, self.props, rho[:-1], rho[1:])
            self.counters.flops += 2 * FLOPS_PER_FACE * (nz - 1)
        acc = np.zeros(nz, dtype=F32)
        for dr in CANONICAL_DIRECTIONS:
            if not self.has_face(dr.label):
                continue
            slot = self.slots[dr.label]
            if dr.dz < 0:
                acc[1:] = acc[1:] + slot[1:]
            elif dr.dz > 0:
                acc[:-1] = acc[:-1] + slot[:-1]
            else:
                acc = acc + slot
        self.residual[:] = acc


@dataclass
class FabricRun:
    digests: list | None
    counters: FabricCounters
    residual: CellField | None = None


class Fabric:
    """Grid of PEs with a barrier-synchronised message network."""

    def __init__(
        self,
        mesh: Mesh,
        props: FluidProps,
        workers: int = 1,
        memory_budget: int = DEFAULT_MEMORY_BUDGET,
    ):
        self.mesh = mesh
        self.dims = mesh.dims
        self.props = props
        self.workers = max(1, int(workers))
        self.memory_budget = memory_budget
        self.pes: dict[PeId, PE] = {}
        for py in range(self.dims.ny):
            for px in range(self.dims.nx):
                pid = PeId(px, py)
                self.pes[pid] = PE(pid, mesh, props)
        self.severed: set[tuple[PeId, Link]] = set()
        self._pool: ThreadPoolExecutor | None = None
        over = self.memory_over_budget()
        if over:
            log.warning(
                "%d PEs exceed the %d-byte memory budget (max %d bytes)",
                len(over), memory_budget, max(over.values()),
            )

    # -- diagnostics -------------------------------------------------------

    def memory_over_budget(self) -> dict[PeId, int]:
        return {pid: pe.memory_bytes() for pid, pe in self.pes.items() if pe.memory_bytes() > self.memory_budget}

    def counters(self) -> FabricCounters:
        total = FabricCounters()
        for pe in self.pes.values():
            total += pe.counters
        return total

    def reset_counters(self) -> None:
        for pe in self.pes.values():
            pe.counters = FabricCounters()

    def sever(self, pe: PeId, link: Link) -> None:
        """Drop every message leaving ``pe`` on ``link`` (fault injection)."""
        self.severed.add((PeId(*pe), link))

    # -- scheduling --------------------------------------------------------

    def _phase(self, fn: Callable[[PE], None]) -> None:
        pes = list(self.pes.values())
        if self._pool is None:
            for pe in pes:
                fn(pe)
        else:
            # list() re-raises the first worker exception
            list(self._pool.map(fn, pes))
        self._deliver()

    def _deliver(self) -> None:
        for pid, pe in self.pes.items():
            for link, msg in pe.outbox:
                if (pid, link) in self.severed:
                    continue
                if link == Link.RAMP:
                    pe.switches.append(msg)
                    continue
                dst = self.pes[pe.neighbors[link]]
                port = OPPOSITE[link]
                if isinstance(msg, SwitchCommand):
                    dst.switches.append(msg)
                    continue
                if msg.color == Color.CARDINAL and dst.router.position[Color.CARDINAL] != RECEIVING:
                    raise ProtocolError(
                        f"PE {tuple(dst.pid)} got CARDINAL data from {tuple(pid)} while in sending position"
                    )
                key = (msg.color, port)
                if key in dst.inbox:
                    raise ProtocolError(f"PE {tuple(dst.pid)}: second {msg.color.name} message on {port.name}")
                dst.inbox[key] = Message(msg.color, msg.payload, msg.origin, link, msg.hops + 1, msg.via)
                dst.counters.words_received += msg.payload.size
                dst.counters.hops_total += msg.hops + 1
            pe.outbox.clear()

    # -- protocol ----------------------------------------------------------

    def cardinal_exchange(self) -> None:
        for step in (1, 2):
            self._phase(lambda pe: pe.broadcast())
            self._phase(lambda pe, s=step: pe.receive_cardinal(s))

    def diagonal_exchange(self) -> None:
        self._phase(lambda pe: pe.relay())
        self._phase(lambda pe: pe.receive_diagonal())

    def load(
        self,
        app_index: int = 0,
        field_params: FieldParams | None = None,
        comm_only: bool = False,
        pressure: CellField | None = None,
    ) -> None:
        """Load one application's pressure column into every PE."""
        if pressure is None:
            pressure = pressure_field(self.dims, app_index, field_params)
        elif pressure.dims != self.dims:
            raise MeshError(f"pressure dims {pressure.dims} do not match fabric {self.dims}")
        values = pressure.values
        self._phase(lambda pe: pe.load(values, comm_only))

    def finish(self) -> None:
        """Local vertical fluxes and canonical-order accumulation."""
        self._phase(lambda pe: pe.finish())

    def run_application(
        self,
        app_index: int,
        field_params: FieldParams | None = None,
        comm_only: bool = False,
        pressure: CellField | None = None,
    ) -> CellField | None:
        """One distributed application of the kernel; ``None`` in comm-only mode."""
        pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._pool = pool
        try:
            self.load(app_index, field_params, comm_only, pressure)
            self.cardinal_exchange()
            self.diagonal_exchange()
            self.finish()
        finally:
            self._pool = None
            if pool is not None:
                pool.shutdown()
            for pe in self.pes.values():
                pe.inbox.clear()
                pe.outbox.clear()
                pe.switches.clear()
        if comm_only:
            return None
        return self.gather()

    def gather(self) -> CellField:
        out = np.empty(self.dims.shape, dtype=F32)
        for (px, py), pe in self.pes.items():
            out[:, py, px] = pe.residual
        return CellField(self.dims, out)

    def run_applications(
        self,
        n_apps: int,
        field_params: FieldParams | None = None,
        comm_only: bool = False,
        keep_last: bool = False,
    ) -> FabricRun:
        if n_apps < 1:
            raise ValueError("n_apps must be >= 1")
        self.reset_counters()
        digests = None if comm_only else []
        res = None
        for app in range(n_apps):
            res = self.run_application(app, field_params, comm_only)
            if not comm_only:
                digests.append(Digest.of(res))
        return FabricRun(digests, self.counters(), res if keep_last else None)


def build_fabric(mesh: Mesh, props: FluidProps, workers: int = 1, **kw) -> Fabric:
    return Fabric(mesh, props, workers=workers, **kw)


def analytic_word_counts(nx: int, ny: int, nz: int) -> dict:
    """Closed-form per-application fabric word counts for an nx-by-ny fabric."""
    block = 2 * nz
    cardinal = block * 2 * ((nx - 1) * ny + nx * (ny - 1))
    diagonal = block * 4 * (nx - 1) * (ny - 1)
    return {"cardinal": cardinal, "diagonal": diagonal, "total": cardinal + diagonal}


def diagonal_intermediary(target: PeId, face: str) -> PeId:
    """Clockwise relay PE for the diagonal neighbour of ``target`` across ``face``."""
    x, y = target
    return {
        "-x-y": PeId(x, y - 1),
        "+x-y": PeId(x + 1, y),
        "+x+y": PeId(x, y + 1),
        "-x+y": PeId(x - 1, y),
    }[face]
