"""Throughput benchmark over a (precision, skip) matrix in synchronous mode."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from g2r.enhance import EnhancerKind, EnhancerPrecision, EnhancerSpec, calibrate_int8
from g2r.errors import G2RError

log = logging.getLogger(__name__)

BENCH_SCHEMA_VERSION = 1
WARMUP_FRACTION = 0.1
# per-frame enhancer cost model, seconds; reduced precision is cheaper
DEFAULT_COSTS = {"f32": 0.080, "f16emu": 0.040, "int8": 0.025}
CSV_FIELDS = ("precision", "skip", "status", "fps", "p50_s", "p99_s", "ticks", "warmup_ticks", "window_inferences")

_bench_ids = itertools.count()


class CellFailed(G2RError):
    def __init__(self, cell, cause):
        super().__init__(f"cell {cell} failed: {cause}")
        self.cell = cell
        self.cause = cause


@dataclass(frozen=True)
class Cell:
    precision: str
    skip: int

    def __post_init__(self):
        object.__setattr__(self, "precision", EnhancerPrecision(str(self.precision).lower()).value)
        if self.skip < 0:
            raise ValueError("skip must be non-negative")

    def __str__(self):
        return f"{self.precision}:{self.skip}"


def parse_matrix(text: str) -> list[Cell]:
    """``"f32:0,f32:3,f16emu:0"`` -> cells, in the given order."""
    cells = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        precision, sep, skip = item.partition(":")
        if not sep or not skip.strip().isdigit():
            raise ValueError(f"bad matrix cell {item!r}; expected precision:skip")
        cells.append(Cell(precision.strip(), int(skip)))
    if not cells:
        raise ValueError("benchmark matrix is empty")
    return cells


@dataclass(frozen=True)
class Workload:
    ticks: int = 100
    seed: int = 3
    width: int = 192
    height: int = 108
    autopilot_speed: float = 8.0
    kind: str = "identity"
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))
    transfer_cost: float = 0.0  # seconds added to every engine tick
    tick_budget: float = 0.05  # seconds; the engine's fixed step

    def __post_init__(self):
        if self.ticks < 2:
            raise ValueError("workload needs at least two ticks")
        if self.transfer_cost < 0 or self.tick_budget <= 0:
            raise ValueError("transfer_cost must be >= 0 and tick_budget > 0")
        costs = {EnhancerPrecision(str(k).lower()).value: float(v) for k, v in self.costs.items()}
        if any(v < 0 for v in costs.values()):
            raise ValueError("enhancer costs must be non-negative")
        object.__setattr__(self, "costs", costs)

    def fingerprint(self, cells) -> str:
        body = json.dumps({"workload": asdict(self), "cells": [str(c) for c in cells]}, sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def warmup_ticks(ticks: int, skip: int) -> int:
    """First ~10% of ticks, rounded up to a whole inference period."""
    step = skip + 1
    return math.ceil(WARMUP_FRACTION * ticks / step) * step


def expected_inferences(ticks: int, skip: int) -> int:
    window = ticks - warmup_ticks(ticks, skip)
    return math.ceil(window / (skip + 1))


@dataclass
class CellResult:
    precision: str
    skip: int
    status: str = "ok"
    fps: float | None = None
    p50_s: float | None = None
    p99_s: float | None = None
    ticks: int = 0
    warmup_ticks: int = 0
    window_inferences: int = 0
    within_budget: bool | None = None
    error: str | None = None


@dataclass
class BenchReport:
    fingerprint: str
    workload: dict
    cells: list

    def cell(self, precision, skip) -> CellResult:
        precision = EnhancerPrecision(str(precision).lower()).value
        for c in self.cells:
            if c.precision == precision and c.skip == skip:
                return c
        raise KeyError(f"{precision}:{skip}")

    def to_dict(self) -> dict:
        return {
            "schema": BENCH_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "workload": self.workload,
            "warmup_fraction": WARMUP_FRACTION,
            "cells": [asdict(c) for c in self.cells],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for c in self.cells:
            w.writerow(asdict(c))
        return buf.getvalue()


def _calibration(workload: Workload):
    from g2r.mockengine import CameraModel, random_world, render_sensors

    cam = CameraModel(workload.width, workload.height)
    return calibrate_int8([render_sensors(random_world(workload.seed + i, cam)).rgb for i in range(4)])


def enhancer_spec(cell: Cell, workload: Workload, calibration=None) -> EnhancerSpec:
    precision = EnhancerPrecision(cell.precision)
    if precision == EnhancerPrecision.INT8 and calibration is None:
        calibration = _calibration(workload)
    return EnhancerSpec(
        kind=EnhancerKind(workload.kind),
        precision=precision,
        calibration=calibration if precision == EnhancerPrecision.INT8 else None,
        simulated_cost=workload.costs.get(cell.precision, 0.0),
    )


def run_cell(cell: Cell, workload: Workload) -> CellResult:
    from g2r.mockengine import CameraModel, EngineService, random_world
    from g2r.pipeline import PipelineConfig, open_session, run_synchronous
    from g2r.wire.transport import serve

    world = random_world(workload.seed, CameraModel(workload.width, workload.height))
    service = EngineService(world, autopilot_speed=workload.autopilot_speed)
    cost = workload.transfer_cost

    def engine(keys):
        start = time.perf_counter()
        out = service(keys)
        if cost:
            time.sleep(max(0.0, start + cost - time.perf_counter()))
        return out

    cfg = PipelineConfig(mode="sync", skip=cell.skip, enhancer=enhancer_spec(cell, workload))
    endpoint = f"inproc://bench-{next(_bench_ids)}"
    with serve(engine, endpoint, info=service.info):
        stats = run_synchronous(cfg, open_session(endpoint, cfg), max_ticks=workload.ticks)
    if stats.enhancer_failures:
        raise CellFailed(cell, f"enhancer failed on {len(stats.enhancer_failures)} frames")
    warm = warmup_ticks(workload.ticks, cell.skip)
    intervals = np.diff(stats.tick_times[warm:])
    return CellResult(
        cell.precision,
        cell.skip,
        fps=stats.window_fps(warm),
        p50_s=float(np.percentile(intervals, 50)),
        p99_s=float(np.percentile(intervals, 99)),
        ticks=stats.ticks,
        warmup_ticks=warm,
        window_inferences=sum(1 for f in stats.inferred_frames if f >= warm),
        within_budget=bool(np.percentile(intervals, 99) < workload.tick_budget),
    )


def fps_benchmark(matrix, workload: Workload = Workload()) -> BenchReport:
    """Run each cell in turn; a failing cell is recorded and the rest still run."""
    cells = parse_matrix(matrix) if isinstance(matrix, str) else [c if isinstance(c, Cell) else Cell(*c) for c in matrix]
    if workload.ticks - warmup_ticks(workload.ticks, max(c.skip for c in cells)) < 2:
        raise ValueError("workload too short for a measurement window after warmup")
    results = []
    for cell in cells:
        log.info("bench cell %s", cell)
        try:
            results.append(run_cell(cell, workload))
        except Exception as exc:
            log.warning("bench cell %s failed: %s", cell, exc)
            cause = exc.cause if isinstance(exc, CellFailed) else exc
            results.append(CellResult(cell.precision, cell.skip, status="failed", error=f"{type(cause).__name__}: {cause}"))
    return BenchReport(workload.fingerprint(cells), asdict(workload), results)
