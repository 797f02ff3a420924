"""Performance-model arithmetic: op census, traffic, intensity, roofline."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, fields, replace

WORD_BYTES = 4

# per-instruction cost: (flops, memory loads, memory stores, fabric loads)
OP_COSTS = {
    "fmul": (1, 2, 1, 0),
    "fsub": (1, 2, 1, 0),
    "fneg": (1, 1, 1, 0),
    "fadd": (1, 2, 1, 0),
    "fma": (2, 3, 1, 0),
    "fmov": (0, 0, 1, 1),
}

MEMORY_BOUND = "memory-bound"
COMPUTE_BOUND = "compute-bound"


@dataclass(frozen=True)
class OpCensus:
    """Instruction counts for one interior mesh cell.

    Defaults are the CS-2 per-cell counts: ten faces at 6 FMUL, 4 FSUB,
    1 FNEG, 1 FADD and 1 FMA each, plus 16 fabric moves.
    """

    fmul: int = 60
    fsub: int = 40
    fneg: int = 10
    fadd: int = 10
    fma: int = 10
    fmov: int = 16

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} count must be non-negative")

    @classmethod
    def per_face(cls) -> "OpCensus":
        return cls(fmul=6, fsub=4, fneg=1, fadd=1, fma=1, fmov=0)

    @classmethod
    def zero(cls) -> "OpCensus":
        return cls(0, 0, 0, 0, 0, 0)

    def counts(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def scaled(self, k: int) -> "OpCensus":
        return replace(self, **{n: c * k for n, c in self.counts().items()})

    def rows(self) -> list[dict]:
        out = []
        for op, n in self.counts().items():
            flop, ld, st, fab = OP_COSTS[op]
            out.append({"op": op.upper(), "count": n, "flop": flop, "loads": ld, "stores": st, "fabric_loads": fab})
        return out


@dataclass(frozen=True)
class Traffic:
    accesses: int

    @property
    def bytes(self) -> int:
        return self.accesses * WORD_BYTES


def flops_per_cell(census: OpCensus) -> int:
    return sum(n * OP_COSTS[op][0] for op, n in census.counts().items())


def memory_traffic_per_cell(census: OpCensus) -> Traffic:
    return Traffic(sum(n * (OP_COSTS[op][1] + OP_COSTS[op][2]) for op, n in census.counts().items()))


def fabric_traffic_per_cell(census: OpCensus) -> Traffic:
    return Traffic(sum(n * OP_COSTS[op][3] for op, n in census.counts().items()))


def arithmetic_intensity(census: OpCensus) -> tuple[float, float]:
    """(memory, fabric) intensity in FLOP per byte."""
    flops = flops_per_cell(census)
    mem = memory_traffic_per_cell(census).bytes
    fab = fabric_traffic_per_cell(census).bytes
    if mem == 0 or fab == 0:
        raise ValueError("arithmetic intensity undefined for zero traffic")
    return flops / mem, flops / fab


def throughput(total_cells: int, n_apps: int, seconds: float) -> float:
    """Cells processed per second."""
    if not seconds > 0:
        raise ValueError("seconds must be positive")
    return total_cells * n_apps / seconds


@dataclass(frozen=True)
class MachineModel:
    name: str
    peak_flops: float
    mem_bandwidth: float
    fabric_bandwidth: float

    def __post_init__(self):
        for n in ("peak_flops", "mem_bandwidth", "fabric_bandwidth"):
            if not getattr(self, n) > 0:
                raise ValueError(f"{n} must be positive")

    def bandwidth(self, resource: str) -> float:
        return {"memory": self.mem_bandwidth, "fabric": self.fabric_bandwidth}[resource]

    @classmethod
    def parse(cls, text: str) -> "MachineModel":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        missing = {"name", "peak_flops", "mem_bandwidth", "fabric_bandwidth"} - kv.keys()
        if missing:
            raise ValueError(f"machine model missing keys: {sorted(missing)}")
        return cls(
            kv["name"],
            float(kv["peak_flops"]),
            float(kv["mem_bandwidth"]),
            float(kv["fabric_bandwidth"]),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MachineModel":
        with open(path) as fh:
            return cls.parse(fh.read())


@dataclass(frozen=True)
class RooflinePoint:
    resource: str
    arithmetic_intensity: float
    achieved_flops: float
    attainable_flops: float
    bound: str


def classify(intensity: float, bandwidth: float, peak_flops: float) -> str:
    # ridge-point ties count as compute-bound
    return COMPUTE_BOUND if intensity * bandwidth >= peak_flops else MEMORY_BOUND


def achieved_flops(census: OpCensus, measured_seconds: float, total_cells: int, n_apps: int) -> float:
    return flops_per_cell(census) * total_cells * n_apps / measured_seconds


def roofline_point(
    machine: MachineModel,
    census: OpCensus,
    measured_seconds: float,
    total_cells: int,
    n_apps: int,
) -> dict[str, RooflinePoint]:
    if not measured_seconds > 0:
        raise ValueError("measured_seconds must be positive")
    achieved = achieved_flops(census, measured_seconds, total_cells, n_apps)
    out = {}
    for resource, ai in zip(("memory", "fabric"), arithmetic_intensity(census)):
        bw = machine.bandwidth(resource)
        attainable = min(machine.peak_flops, ai * bw) if math.isfinite(bw) else machine.peak_flops
        out[resource] = RooflinePoint(resource, ai, achieved, attainable, classify(ai, bw, machine.peak_flops))
    return out


def metrics_report(
    census: OpCensus | None = None,
    machine: MachineModel | None = None,
    seconds: float | None = None,
    total_cells: int | None = None,
    n_apps: int | None = None,
) -> dict:
    """JSON-ready metrics block."""
    census = census or OpCensus()
    mem = memory_traffic_per_cell(census)
    fab = fabric_traffic_per_cell(census)
    rep = {
        "census": census.rows(),
        "flops_per_cell": flops_per_cell(census),
        "memory_accesses_per_cell": mem.accesses,
        "memory_bytes_per_cell": mem.bytes,
        "fabric_words_per_cell": fab.accesses,
        "fabric_bytes_per_cell": fab.bytes,
    }
    if mem.accesses and fab.accesses:
        ai_mem, ai_fab = arithmetic_intensity(census)
        rep["intensity"] = {"memory": ai_mem, "fabric": ai_fab}
    if seconds is not None and total_cells is not None and n_apps is not None:
        rep["throughput_cells_per_s"] = throughput(total_cells, n_apps, seconds)
        rep["achieved_flops"] = achieved_flops(census, seconds, total_cells, n_apps)
        if machine is not None:
            pts = roofline_point(machine, census, seconds, total_cells, n_apps)
            rep["roofline"] = {
                "machine": machine.name,
                "points": {k: vars(p) for k, p in pts.items()},
            }
    return rep


def census_csv(census: OpCensus) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["op", "count", "flop", "loads", "stores", "fabric_loads"])
    w.writeheader()
    w.writerows(census.rows())
    return buf.getvalue()
