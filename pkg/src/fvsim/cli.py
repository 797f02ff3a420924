"""Command-line driver: generate meshes, run solvers, compare, sweep, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fabric as fab
from . import reference
from .mesh import (
    FieldParams,
    GeneratorParams,
    Mesh,
    MeshDims,
    MeshError,
    generate_synthetic,
    load_field,
    load_mesh,
    pressure_field,
    save_field,
    save_mesh,
)
from .metrics import MachineModel, OpCensus, metrics_report
from .physics import FluidProps

log = logging.getLogger("fvsim")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MISMATCH = 4
EXIT_DEADLOCK = 5

MODES = ("reference", "simulate", "both", "comm-only")
DEFAULT_DIMS = (32, 32, 8)
DEFAULT_APPS = 100


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    dims: tuple[int, int, int] = DEFAULT_DIMS
    props: FluidProps = field(default_factory=FluidProps)
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    field_params: FieldParams = field(default_factory=FieldParams)
    n_apps: int = DEFAULT_APPS
    mode: str = "both"
    workers: int = 1
    mesh_path: str | None = None
    machine_path: str | None = None
    tolerance: float = 0.0

    def __post_init__(self):
        if self.n_apps < 1:
            raise UsageError("--apps must be >= 1")
        if self.mode not in MODES:
            raise UsageError(f"--mode must be one of {MODES}")
        if self.tolerance < 0:
            raise UsageError("--tolerance must be >= 0")
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")
        try:
            MeshDims(*self.dims)
        except (MeshError, TypeError) as exc:
            raise UsageError(str(exc)) from None

    def echo(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["generator"]["family_phase"] = list(self.generator.family_phase)
        return d


def _mesh_for(cfg: RunConfig) -> Mesh:
    if cfg.mesh_path:
        return load_mesh(cfg.mesh_path)
    return generate_synthetic(cfg.dims, cfg.generator)


def _compare(a, b) -> dict:
    av = a.flat().astype(np.float64)
    bv = b.flat().astype(np.float64)
    diff = np.abs(av - bv)
    scale = np.maximum(np.abs(bv), np.finfo(np.float32).tiny)
    return {
        "bit_exact": a.bit_equal(b),
        "max_abs_diff": float(diff.max(initial=0.0)),
        "max_rel_diff": float((diff / scale).max(initial=0.0)),
    }


def _verdict(cmps: list[dict], tolerance: float) -> dict:
    max_abs = max(c["max_abs_diff"] for c in cmps)
    max_rel = max(c["max_rel_diff"] for c in cmps)
    if all(c["bit_exact"] for c in cmps):
        verdict = "bit-exact"
    elif max_abs <= tolerance:
        verdict = "within-tolerance"
    else:
        verdict = "mismatch"
    return {"verdict": verdict, "max_abs_diff": max_abs, "max_rel_diff": max_rel, "tolerance": tolerance}


def run(cfg: RunConfig) -> dict:
    """Execute one configured run and return the report dict."""
    mesh = _mesh_for(cfg)
    cfg.dims = (mesh.dims.nx, mesh.dims.ny, mesh.dims.nz)
    machine = MachineModel.load(cfg.machine_path) if cfg.machine_path else None
    n_cells = mesh.dims.n_cells
    report: dict = {"config": cfg.echo(), "digests": {}}
    wall: dict = {}
    ref_fields, sim_fields = [], []

    if cfg.mode in ("reference", "both"):
        t0 = time.perf_counter()
        for app in range(cfg.n_apps):
            p = pressure_field(mesh.dims, app, cfg.field_params)
            ref_fields.append(reference.apply(mesh, p, cfg.props, cfg.workers))
        wall["reference_seconds"] = time.perf_counter() - t0
        report["digests"]["reference"] = [reference.Digest.of(r).to_dict() for r in ref_fields]

    if cfg.mode in ("simulate", "both", "comm-only"):
        comm_only = cfg.mode == "comm-only"
        fabric = fab.build_fabric(mesh, cfg.props, workers=cfg.workers)
        t0 = time.perf_counter()
        for app in range(cfg.n_apps):
            res = fabric.run_application(app, cfg.field_params, comm_only=comm_only)
            if res is not None:
                sim_fields.append(res)
        wall["simulate_seconds"] = time.perf_counter() - t0
        report["counters"] = fabric.counters().to_dict()
        over = fabric.memory_over_budget()
        report["memory"] = {
            "budget_bytes": fabric.memory_budget,
            "max_pe_bytes": max(pe.memory_bytes() for pe in fabric.pes.values()),
            "over_budget_pes": len(over),
        }
        if not comm_only:
            report["digests"]["simulate"] = [reference.Digest.of(r).to_dict() for r in sim_fields]

    report["metrics"] = metrics_report(OpCensus())
    timed = wall.get("simulate_seconds", wall.get("reference_seconds"))
    if timed:
        wall["metrics"] = metrics_report(OpCensus(), machine, timed, n_cells, cfg.n_apps)
        for k in ("census", "intensity"):
            wall["metrics"].pop(k, None)
    if cfg.mode == "both":
        report["comparison"] = _verdict(
            [_compare(s, r) for s, r in zip(sim_fields, ref_fields)], cfg.tolerance
        )
    report["wall_clock"] = wall
    report["_last_residual"] = (sim_fields or ref_fields or [None])[-1]
    return report


def scaling_sweep(sizes, nz: int, n_apps: int = 1, workers: int = 1, props=None, generator=None, field_params=None) -> list[dict]:
    if not sizes:
        raise UsageError("scaling sweep needs at least one size")
    props = props or FluidProps()
    rows = []
    for nx, ny in sizes:
        mesh = generate_synthetic((nx, ny, nz), generator)
        fabric = fab.build_fabric(mesh, props, workers=workers)
        t0 = time.perf_counter()
        fabric.run_applications(n_apps, field_params)
        secs = time.perf_counter() - t0
        c = fabric.counters()
        expected = fab.analytic_word_counts(nx, ny, nz)["total"] * n_apps
        rows.append(
            {
                "nx": nx,
                "ny": ny,
                "nz": nz,
                "total_cells": nx * ny * nz,
                "n_apps": n_apps,
                "words_received": c.words_received,
                "words_expected": expected,
                "words_forwarded": c.words_forwarded,
                "control_messages": c.control_messages,
                "wall_clock_seconds": secs,
                "wall_clock_cells_per_s": nx * ny * nz * n_apps / secs,
            }
        )
    return rows


# -- argument handling -----------------------------------------------------


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; expected NX,NY,NZ") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; expected NX,NY,NZ")
    return parts


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            nx, ny = (int(v) for v in item.lower().split("x"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {item!r}; expected NXxNY") from None
        out.append((nx, ny))
    return out


def _load_seed_params(path: str | None):
    if not path:
        return FluidProps(), GeneratorParams(), FieldParams()
    with open(path) as fh:
        raw = json.load(fh)
    gen = dict(raw.get("generator", {}))
    if "family_phase" in gen:
        gen["family_phase"] = tuple(gen["family_phase"])
    try:
        return FluidProps(**raw.get("props", {})), GeneratorParams(**gen), FieldParams(**raw.get("field", {}))
    except TypeError as exc:
        raise UsageError(f"bad seed params: {exc}") from None


def _default_workers() -> int:
    try:
        return int(os.environ.get("FVSIM_WORKERS", "1"))
    except ValueError:
        return 1


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _run_csv(report: dict) -> str:
    rows = []
    digests = report["digests"]
    n = max((len(v) for v in digests.values()), default=0)
    for app in range(n):
        row = {"app": app}
        for mode, ds in digests.items():
            for k, v in ds[app].items():
                row[f"{mode}_{k}"] = v
        rows.append(row)
    return _rows_csv(rows)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fvsim", description="TPFA flux kernel on a simulated PE fabric")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dims=True):
        if dims:
            sp.add_argument("--dims", type=_parse_dims, default=DEFAULT_DIMS, help="NX,NY,NZ")
        sp.add_argument("--seed-params", help="JSON file with props/generator/field parameters")
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    g = sub.add_parser("generate", help="write a synthetic mesh in FVM1 format")
    g.add_argument("--dims", type=_parse_dims, default=DEFAULT_DIMS)
    g.add_argument("--seed-params")
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run reference and/or simulator")
    common(r)
    r.add_argument("--mesh", help="FVM1 mesh file (overrides --dims)")
    r.add_argument("--apps", type=int, default=DEFAULT_APPS)
    r.add_argument("--mode", choices=MODES, default="both")
    r.add_argument("--workers", type=int, default=_default_workers())
    r.add_argument("--machine", help="machine-model file (key = value)")
    r.add_argument("--tolerance", type=float, default=0.0)
    r.add_argument("--residual-out", help="write the last residual as an FVF1 file")

    c = sub.add_parser("compare", help="compare two FVF1 residual files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tolerance", type=float, default=0.0)
    c.add_argument("--out")

    s = sub.add_parser("scaling-sweep", help="counters and timings over fabric sizes")
    common(s, dims=False)
    s.add_argument("--sizes", type=_parse_sizes, required=True, help="NXxNY,NXxNY,...")
    s.add_argument("--nz", type=int, default=DEFAULT_DIMS[2])
    s.add_argument("--apps", type=int, default=1)
    s.add_argument("--workers", type=int, default=_default_workers())

    m = sub.add_parser("metrics", help="census, intensities, throughput and roofline")
    m.add_argument("--machine")
    m.add_argument("--seconds", type=float)
    m.add_argument("--cells", type=int)
    m.add_argument("--apps", type=int)
    m.add_argument("--out")
    m.add_argument("--format", choices=("json", "csv"), default="json")
    return p


def _cmd_generate(args) -> int:
    props, gen, _ = _load_seed_params(args.seed_params)
    try:
        mesh = generate_synthetic(args.dims, gen)
    except MeshError as exc:
        raise UsageError(str(exc)) from None
    save_mesh(mesh, args.out)
    return EXIT_OK


def _cmd_run(args) -> int:
    props, gen, fp = _load_seed_params(args.seed_params)
    cfg = RunConfig(
        dims=args.dims,
        props=props,
        generator=gen,
        field_params=fp,
        n_apps=args.apps,
        mode=args.mode,
        workers=args.workers,
        mesh_path=args.mesh,
        machine_path=args.machine,
        tolerance=args.tolerance,
    )
    report = run(cfg)
    last = report.pop("_last_residual")
    if args.residual_out and last is not None:
        save_field(last, args.residual_out)
    _emit(_run_csv(report) if args.format == "csv" else _dump(report), args.out)
    if report.get("comparison", {}).get("verdict") == "mismatch":
        return EXIT_MISMATCH
    return EXIT_OK


def _cmd_compare(args) -> int:
    a, b = load_field(args.a), load_field(args.b)
    if a.dims != b.dims:
        _emit(_dump({"verdict": "mismatch", "reason": "dimension mismatch"}), args.out)
        return EXIT_MISMATCH
    v = _verdict([_compare(a, b)], args.tolerance)
    _emit(_dump(v), args.out)
    return EXIT_MISMATCH if v["verdict"] == "mismatch" else EXIT_OK


def _cmd_sweep(args) -> int:
    if args.apps < 1 or args.nz < 1:
        raise UsageError("--apps and --nz must be >= 1")
    props, gen, fp = _load_seed_params(args.seed_params)
    try:
        rows = scaling_sweep(args.sizes, args.nz, args.apps, args.workers, props, gen, fp)
    except MeshError as exc:
        raise UsageError(str(exc)) from None
    _emit(_rows_csv(rows) if args.format == "csv" else _dump(rows), args.out)
    return EXIT_OK if all(r["words_received"] == r["words_expected"] for r in rows) else EXIT_MISMATCH


def _cmd_metrics(args) -> int:
    machine = MachineModel.load(args.machine) if args.machine else None
    timed = (args.seconds, args.cells, args.apps)
    if any(v is not None for v in timed) and not all(v is not None for v in timed):
        raise UsageError("--seconds, --cells and --apps go together")
    census = OpCensus()
    rep = metrics_report(census, machine, *timed)
    if args.format == "csv":
        _emit(_rows_csv(census.rows()), args.out)
    else:
        _emit(_dump(rep), args.out)
    return EXIT_OK


COMMANDS = {
    "generate": _cmd_generate,
    "run": _cmd_run,
    "compare": _cmd_compare,
    "scaling-sweep": _cmd_sweep,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except fab.DeadlockError as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except (OSError, MeshError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
