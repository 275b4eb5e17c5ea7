"""Master YAML configuration: one file, one section per module, with overrides."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from g2r.datagen.boxes import DETECTION_NAMES
from g2r.datagen.writer import PRODUCTS
from g2r.enhance import EnhancerKind, EnhancerPrecision
from g2r.mockengine.world import FIXED_DT, PRESET_NAMES
from g2r.schema import Field, RangeViolation, Validator, YamlSyntax, describe, load_yaml, raise_all

log = logging.getLogger(__name__)

ENV_PREFIX = "G2R_"
MOCK_ENDPOINT = "mock"  # serve the built-in engine in-process


def _size(v):
    if len(v) != 2 or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v):
        return "expected [width, height], two positive integers"
    return None


def _products(v):
    bad = [p for p in v if p not in PRODUCTS]
    return f"unknown products {bad}; known: {sorted(PRODUCTS)}" if bad else None


def _classes(v):
    bad = [c for c in v if c not in DETECTION_NAMES]
    return f"unknown detection classes {bad}" if bad else None


def _streams(v):
    from g2r.wire.transport import stream_key

    for s in v:
        try:
            stream_key(s)
        except Exception:
            return f"unknown stream {s!r}"
    return None


def _matrix(v):
    from g2r.eval.bench import parse_matrix

    try:
        parse_matrix(v)
    except ValueError as exc:
        return str(exc)
    return None


def _costs(v):
    for k, x in v.items():
        if k not in [p.value for p in EnhancerPrecision]:
            return f"unknown precision {k!r}"
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x < 0:
            return f"cost for {k} must be a non-negative number"
    return None


SCHEMA = {
    "engine": Field(
        "map",
        doc="the simulator, or the built-in mock engine",
        children={
            "mode": Field("str", default="sync", choices=("sync", "async")),
            "endpoint": Field("str", default=MOCK_ENDPOINT, doc="'mock' or tcp://host:port of an engine server"),
            "resolution": Field("list", default=[960, 540], check=_size, doc="camera [width, height]"),
            "fixed_dt": Field("float", default=FIXED_DT, minimum=0.0, exclusive_min=True, doc="seconds per tick"),
            "seed": Field("int", default=0, minimum=0, doc="the single seed all randomness derives from"),
            "weather": Field("str", default="ClearNoon", choices=PRESET_NAMES),
            "town_profile": Field("str", default="procedural"),
            "vehicles": Field("int", default=6, minimum=0),
            "pedestrians": Field("int", default=4, minimum=0),
            "props": Field("int", default=8, minimum=0),
            "autopilot_speed": Field("float", default=8.0, minimum=0.0, doc="ego cruise speed, m/s"),
            "period": Field("float", default=0.0, minimum=0.0, doc="async mode: seconds between engine ticks"),
            "jitter": Field("int", default=0, minimum=0, doc="sync mode fault injection: max per-stream delay in frames"),
        },
    ),
    "pipeline": Field(
        "map",
        children={
            "mode": Field("str", default="sync", choices=("sync", "async"), doc="must equal engine.mode"),
            "skip": Field("int", default=0, minimum=0, doc="enhance every (skip+1)-th frame"),
            "subscribe": Field("list", default=[], check=_streams, doc="extra streams beyond what the enhancer needs"),
            "max_staleness": Field("int", default=1, minimum=0, doc="async mode bound, frames"),
            "staleness_hard": Field("bool", default=False, doc="async: fail instead of counting violations"),
            "queue_capacity": Field("int", default=8, minimum=1),
            "drop_oldest": Field("bool", default=None, doc="default: false in sync, true in async"),
            "target_res": Field("list", default=None, check=_size, doc="enhancer input [width, height]; null keeps native"),
            "lanes": Field("int", default=3, minimum=1),
            "reorder_window": Field("int", default=4, minimum=0, doc="sync: frames a late part may trail"),
            "ring_depth": Field("int", default=16, minimum=1, doc="async: staged frames kept per stream"),
            "timeout": Field("float", default=10.0, minimum=0.0, exclusive_min=True, doc="seconds"),
        },
    ),
    "enhancer": Field(
        "map",
        children={
            "kind": Field("str", default="identity", choices=tuple(k.value for k in EnhancerKind)),
            "precision": Field("str", default="f32", choices=tuple(p.value for p in EnhancerPrecision)),
            "target_stats": Field("str", default=None, doc="JSON file with per-channel mean/std (stats_match)"),
            "external_endpoint": Field("str", default=None, doc="cmd:<command line> or tcp://host:port"),
            "calibration": Field("str", default=None, doc="JSON calibration table, or 'auto' to calibrate on rendered frames (int8)"),
            "deadline": Field("float", default=1.0, minimum=0.0, exclusive_min=True, doc="seconds per external call"),
            "simulated_cost": Field("float", default=0.0, minimum=0.0, doc="seconds of busy time per frame"),
        },
    ),
    "capture": Field(
        "map",
        children={
            "enabled": Field("bool", default=False),
            "every_n": Field("int", default=20, minimum=1),
            "out_dir": Field("str", default="capture"),
            "products": Field("list", default=sorted(PRODUCTS), check=_products),
            "image_format": Field("str", default="png", choices=("png", "jpg")),
            "min_box_area": Field("int", default=16, minimum=1, doc="visible pixels"),
            "occlusion_min_points": Field("int", default=1, minimum=0, doc="lidar hits below this flag a box occluded"),
            "detection_classes": Field("list", default=list(DETECTION_NAMES), check=_classes),
        },
    ),
    "scenario_path": Field("str", default=None, doc="scenario YAML, relative to this file"),
    "eval": Field(
        "map",
        children={
            "matrix": Field("str", default="f32:0,f32:3", check=_matrix, doc="precision:skip cells"),
            "ticks": Field("int", default=100, minimum=2),
            "costs": Field("map", default=None, check=_costs, doc="seconds per frame by precision"),
            "transfer_cost": Field("float", default=0.0, minimum=0.0),
            "tick_budget": Field("float", default=0.05, minimum=0.0, exclusive_min=True),
            "resolution": Field("list", default=[192, 108], check=_size),
        },
    ),
}


class ConfigConflict(RangeViolation):
    code = "conflict"


@dataclass(frozen=True, eq=False)
class MasterConfig:
    data: dict
    base_dir: str = "."

    def __eq__(self, other):
        return isinstance(other, MasterConfig) and self.data == other.data

    def section(self, name) -> dict:
        return self.data[name]

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # builders
    def camera(self, resolution=None):
        from g2r.mockengine import CameraModel

        w, h = resolution or self.data["engine"]["resolution"]
        return CameraModel(w, h)

    def world(self, camera=None):
        from g2r.mockengine import random_world

        e = self.data["engine"]
        world = random_world(
            e["seed"],
            camera or self.camera(),
            n_vehicles=e["vehicles"],
            n_pedestrians=e["pedestrians"],
            n_props=e["props"],
            weather=e["weather"],
            town_profile=e["town_profile"],
        )
        return replace(world, fixed_dt=e["fixed_dt"])

    def enhancer_spec(self, calibration_frames=None):
        from g2r.enhance import CalibrationTable, DatasetStats, EnhancerSpec, calibrate_int8

        e = self.data["enhancer"]
        stats = calib = None
        if e["target_stats"]:
            stats = DatasetStats.from_dict(json.loads(self.resolve(e["target_stats"]).read_text()))
        if e["calibration"] == "auto":
            frames = calibration_frames or self._calibration_frames()
            calib = calibrate_int8(frames)
        elif e["calibration"]:
            calib = CalibrationTable.from_dict(json.loads(self.resolve(e["calibration"]).read_text()))
        return EnhancerSpec(
            kind=e["kind"],
            precision=e["precision"],
            target_stats=stats,
            external_endpoint=e["external_endpoint"],
            calibration=calib,
            deadline=e["deadline"],
            simulated_cost=e["simulated_cost"],
        )

    def _calibration_frames(self):
        from g2r.mockengine import random_world, render_sensors

        cam = self.camera()
        seed = self.data["engine"]["seed"]
        return [render_sensors(random_world(seed + 1000 + i, cam)).rgb for i in range(4)]

    def pipeline_config(self, **overrides):
        from g2r.pipeline import PipelineConfig

        p = self.data["pipeline"]
        return PipelineConfig(
            mode=p["mode"],
            skip=p["skip"],
            subscribe=tuple(p["subscribe"]),
            enhancer=overrides.pop("enhancer", None) or self.enhancer_spec(),
            max_staleness=p["max_staleness"],
            staleness_hard=p["staleness_hard"],
            queue_capacity=p["queue_capacity"],
            drop_oldest=p["drop_oldest"],
            target_res=tuple(p["target_res"]) if p["target_res"] else None,
            lanes=p["lanes"],
            reorder_window=p["reorder_window"],
            ring_depth=p["ring_depth"],
            timeout=p["timeout"],
            **overrides,
        )

    def capture_config(self, out_dir=None):
        from g2r.datagen import CaptureConfig

        c = self.data["capture"]
        return CaptureConfig(
            out_dir=str(out_dir or c["out_dir"]),
            every_n=c["every_n"],
            products=frozenset(c["products"]),
            image_format=c["image_format"],
            min_box_area=c["min_box_area"],
            occlusion_min_points=c["occlusion_min_points"],
            detection_classes=tuple(c["detection_classes"]),
        )

    def workload(self, ticks=None):
        from g2r.eval import DEFAULT_COSTS, Workload

        e = self.data["eval"]
        w, h = e["resolution"]
        return Workload(
            ticks=ticks or e["ticks"],
            seed=self.data["engine"]["seed"],
            width=w,
            height=h,
            autopilot_speed=self.data["engine"]["autopilot_speed"],
            kind=self.data["enhancer"]["kind"] if self.data["enhancer"]["kind"] != "external" else "identity",
            costs=e["costs"] or dict(DEFAULT_COSTS),
            transfer_cost=e["transfer_cost"],
            tick_budget=e["tick_budget"],
        )


# -- overrides ------------------------------------------------------------------------


def _set_path(doc: dict, path: str, value, source: str):
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise RangeViolation(path, f"{source}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return yaml.safe_load(text) if text != "" else None
    except yaml.YAMLError:
        return text


def parse_set(item: str) -> tuple[str, object]:
    path, sep, value = item.partition("=")
    if not sep or not path.strip():
        raise RangeViolation("", f"--set expects path=value, got {item!r}")
    return path.strip(), _parse_value(value)


def env_overrides(environ) -> list[tuple[str, object]]:
    """``G2R_PIPELINE__SKIP=3`` sets ``pipeline.skip``; ``__`` separates levels."""
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            path = ".".join(part.lower() for part in name[len(ENV_PREFIX) :].split("__"))
            out.append((path, _parse_value(environ[name])))
    return out


def validate(raw, lines=None, base_dir=".") -> MasterConfig:
    v = Validator(lines)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        v.fail(RangeViolation, "", "config must be a YAML mapping")
        raise_all(v.errors)
    data = v.map(raw, SCHEMA)
    if not v.errors:
        _cross_check(data, v)
    raise_all(v.errors)
    for path in v.defaults_applied:
        log.debug("config default applied: %s", path)
    return MasterConfig(data, str(base_dir))


def _cross_check(d, v: Validator):
    eng, pipe, cap, enh = d["engine"], d["pipeline"], d["capture"], d["enhancer"]
    if eng["mode"] != pipe["mode"]:
        v.fail(ConfigConflict, "pipeline.mode", f"engine runs {eng['mode']} mode, so pipeline.mode must be {eng['mode']!r}")
    if cap["enabled"] and pipe["mode"] != "sync":
        v.fail(ConfigConflict, "capture.enabled", "dataset capture runs in synchronous mode only")
    if cap["enabled"] and cap["every_n"] % (pipe["skip"] + 1):
        v.fail(ConfigConflict, "capture.every_n", f"must be a multiple of pipeline.skip+1 = {pipe['skip'] + 1}")
    if pipe["target_res"] and cap["enabled"] and pipe["target_res"] != eng["resolution"]:
        v.fail(ConfigConflict, "pipeline.target_res", "capture pairs frames with labels, so target_res must equal engine.resolution")
    if enh["kind"] == "stats_match" and not enh["target_stats"]:
        v.fail(ConfigConflict, "enhancer.target_stats", "required for the stats_match enhancer")
    if enh["kind"] == "external" and not enh["external_endpoint"]:
        v.fail(ConfigConflict, "enhancer.external_endpoint", "required for the external enhancer")
    if enh["precision"] == "int8" and not enh["calibration"]:
        v.fail(ConfigConflict, "enhancer.calibration", "int8 needs a calibration table path or 'auto'")
    if eng["jitter"] and eng["mode"] != "sync":
        v.fail(ConfigConflict, "engine.jitter", "jitter injection applies to synchronous mode")


def load_config(path=None, overrides=(), environ=None) -> MasterConfig:
    """File (optional), then ``G2R_*`` environment overrides, then ``--set`` overrides."""
    raw, lines, base = {}, {}, "."
    if path is not None:
        text = Path(path).read_bytes()
        raw, lines = load_yaml(text)
        base = str(Path(path).parent)
        if raw is None:
            raw = {}
    raw = copy.deepcopy(raw)
    if isinstance(raw, dict):
        env = os.environ if environ is None else environ
        for p, value in env_overrides(env):
            _set_path(raw, p, value, "environment")
        for item in overrides:
            p, value = parse_set(item)
            _set_path(raw, p, value, "--set")
    return validate(raw, lines, base)


def loads_config(text) -> MasterConfig:
    raw, lines = load_yaml(text)
    return validate(raw, lines)


def schema_rows():
    return describe(SCHEMA)


__all__ = [
    "ConfigConflict",
    "MasterConfig",
    "SCHEMA",
    "YamlSyntax",
    "env_overrides",
    "load_config",
    "loads_config",
    "parse_set",
    "schema_rows",
    "validate",
]
