"""YAML scenarios: ego spawn, scripted actors and distance-triggered behaviours."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from g2r.core import SemanticClass
from g2r.errors import G2RError
from g2r.mockengine.world import (
    _CLASS_SHAPES,
    PRESET_NAMES,
    Actor,
    ActorKind,
    CameraModel,
    Controls,
    World,
    make_ego,
    weather_preset,
)
from g2r.schema import Field, MissingRequired, RangeViolation, Validator, load_yaml, raise_all

EGO_ID = 1
METRICS = ("planar", "spatial")

# kind -> (actor kind, default class)
KINDS = {
    "vehicle": (ActorKind.Vehicle, SemanticClass.Car),
    "pedestrian": (ActorKind.Pedestrian, SemanticClass.Pedestrian),
    "traffic_light": (ActorKind.TrafficLight, SemanticClass.TrafficLight),
    "prop": (ActorKind.StaticProp, SemanticClass.Building),
}
_DEFAULT_EXTENT = {
    SemanticClass.TrafficLight: (0.2, 0.2, 0.6),
    SemanticClass.Building: (6.0, 4.0, 8.0),
}
CLASS_NAMES = {c.name.lower(): c for c in SemanticClass}


class UnknownActor(G2RError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0  # radians


@dataclass(frozen=True)
class Trigger:
    distance_m: float
    triggered_controls: Controls
    reference: str = "ego"
    one_shot: bool = True
    metric: str = "planar"


@dataclass(frozen=True)
class ScenarioActor:
    id: int
    kind: str
    spawn: Pose
    class_id: int
    extent: tuple
    idle_controls: Controls = Controls()
    speed: float = 0.0
    trigger: Trigger | None = None
    light_cycle: tuple | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: int
    ego_spawn: Pose | None  # None: random, drawn from the seed
    seed: int = 0
    ego_speed: float | None = None  # autopilot target; None leaves the ego idle
    weather: str = "ClearNoon"
    actors: tuple = ()

    def actor(self, actor_id) -> ScenarioActor:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise UnknownActor(actor_id)


# -- schema ---------------------------------------------------------------------------

_CONTROLS = {
    "throttle": Field("float", default=0.0, minimum=0.0, maximum=1.0),
    "brake": Field("float", default=0.0, minimum=0.0, maximum=1.0),
    "steer": Field("float", default=0.0, minimum=-1.0, maximum=1.0),
}
_POSE = {
    "x": Field("float", required=True, doc="metres"),
    "y": Field("float", required=True, doc="metres"),
    "heading_deg": Field("float", default=0.0, doc="degrees, counter-clockwise from +x"),
}
_TRIGGER = {
    "distance_m": Field("float", required=True, minimum=0.0, exclusive_min=True, doc="fires when the reference is this close"),
    "reference": Field("str", default="ego", choices=("ego",)),
    "triggered_controls": Field("map", children=_CONTROLS, doc="replace idle controls once fired"),
    "one_shot": Field("bool", default=True, doc="latch the trigger after the first firing"),
    "metric": Field("str", default="planar", choices=METRICS, doc="planar ignores height"),
}


def _pair(v):
    if len(v) != 2 or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v):
        return "expected [green_ticks, red_ticks], both integers >= 1"
    return None


def _extent(v):
    if len(v) != 3 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in v):
        return "expected three positive half sizes [x, y, z]"
    return None


_ACTOR = {
    "id": Field("int", required=True, minimum=EGO_ID + 1, doc="unique; 1 is the ego"),
    "kind": Field("str", required=True, choices=tuple(KINDS)),
    "class": Field("str", default=None, choices=tuple(CLASS_NAMES), doc="semantic class; defaults by kind"),
    "spawn": Field("map", children=_POSE),
    "extent": Field("list", default=None, check=_extent, doc="half sizes in metres; defaults by class"),
    "speed": Field("float", default=0.0, minimum=0.0, doc="initial speed, m/s"),
    "idle_controls": Field("map", children=_CONTROLS),
    "trigger": Field("map", default=None, doc="optional distance trigger"),
    "light_cycle": Field("list", default=None, check=_pair, doc="traffic lights: [green_ticks, red_ticks]"),
}

SCHEMA = {
    "name": Field("str", required=True),
    "seed": Field("int", default=0, minimum=0, doc="drives the random ego spawn"),
    "duration": Field("int", required=True, minimum=1, doc="ticks"),
    "ego_spawn": Field("str", required=True, doc="'random' or a pose mapping {x, y, heading_deg}"),
    "ego_speed": Field("float", default=None, minimum=0.0, doc="autopilot target speed for the ego, m/s"),
    "weather": Field("str", default="ClearNoon", choices=PRESET_NAMES),
    "actors": Field("list", default=[]),
}


def _controls(d) -> Controls:
    return Controls(d["throttle"], d["brake"], d["steer"])


def _pose(d) -> Pose:
    return Pose(d["x"], d["y"], math.radians(d["heading_deg"]))


def parse_scenario(text) -> Scenario:
    """Parse and validate a scenario document; errors name the offending path."""
    data, lines = load_yaml(text)
    v = Validator(lines)
    if not isinstance(data, dict):
        v.fail(RangeViolation, "", "scenario must be a YAML mapping")
        raise_all(v.errors)
    raw_spawn = data.get("ego_spawn")
    # the spawn is either a pose mapping or 'random'; checked here rather than by the schema
    top = v.map({**data, **({"ego_spawn": "random"} if raw_spawn is not None else {})}, SCHEMA)
    ego_spawn = None
    if isinstance(raw_spawn, dict):
        ego_spawn = _pose(v.map(raw_spawn, _POSE, "ego_spawn"))
    elif raw_spawn is not None and raw_spawn != "random":
        v.fail(RangeViolation, "ego_spawn", f"expected 'random' or a pose mapping, got {raw_spawn!r}")
    actors = []
    seen = set()
    for i, raw in enumerate(top["actors"] or []):
        path = f"actors[{i}]"
        a = v.map(raw, _ACTOR, path)
        if not a or a.get("id") is None or a.get("kind") is None:
            continue
        if a["id"] in seen:
            v.fail(RangeViolation, f"{path}.id", f"duplicate actor id {a['id']}")
        seen.add(a["id"])
        if not isinstance(raw, dict) or "spawn" not in raw:
            v.fail(MissingRequired, f"{path}.spawn", "required field is missing")
            continue
        trigger = None
        if a["trigger"] is not None:
            t = v.map(a["trigger"], _TRIGGER, f"{path}.trigger")
            if t.get("distance_m") is not None:
                trigger = Trigger(t["distance_m"], _controls(t["triggered_controls"]), t["reference"], t["one_shot"], t["metric"])
        kind, default_cls = KINDS[a["kind"]]
        cls = CLASS_NAMES[a["class"]] if a["class"] else default_cls
        if a["light_cycle"] is not None and kind != ActorKind.TrafficLight:
            v.fail(RangeViolation, f"{path}.light_cycle", "only traffic_light actors have a light cycle")
        if a["kind"] == "traffic_light" and a["light_cycle"] is None:
            a["light_cycle"] = [100, 60]
        extent = tuple(float(x) for x in a["extent"]) if a["extent"] else _CLASS_SHAPES.get(cls, _DEFAULT_EXTENT.get(cls, (1.0, 1.0, 1.0)))
        actors.append(
            ScenarioActor(
                a["id"],
                a["kind"],
                _pose(a["spawn"]) if a["spawn"].get("x") is not None and a["spawn"].get("y") is not None else Pose(0.0, 0.0),
                int(cls),
                extent,
                _controls(a["idle_controls"]),
                a["speed"],
                trigger,
                tuple(a["light_cycle"]) if a["light_cycle"] else None,
            )
        )
    raise_all(v.errors)
    return Scenario(top["name"], top["duration"], ego_spawn, top["seed"], top["ego_speed"], top["weather"], tuple(actors))


def load_scenario(path) -> Scenario:
    with open(path, "rb") as f:
        return parse_scenario(f.read())


# -- world construction ---------------------------------------------------------------


def ego_pose(scenario: Scenario) -> Pose:
    if scenario.ego_spawn is not None:
        return scenario.ego_spawn
    rng = np.random.default_rng(scenario.seed)
    lane = float(rng.choice([-3.5, 3.5]))
    return Pose(float(rng.uniform(-20.0, 20.0)), lane, 0.0 if lane < 0 else math.pi)


def build_world(scenario: Scenario, camera: CameraModel = CameraModel()) -> World:
    pose = ego_pose(scenario)
    actors = [make_ego(EGO_ID, pose.x, pose.y, pose.heading)]
    for a in scenario.actors:
        kind = KINDS[a.kind][0]
        z = a.extent[2] + (2.9 if a.kind == "traffic_light" else 0.0)
        actors.append(
            Actor(a.id, a.class_id, kind, (a.spawn.x, a.spawn.y, z), a.spawn.heading, a.extent, a.speed, a.idle_controls, a.light_cycle)
        )
    return World(seed=scenario.seed, actors=tuple(actors), camera=camera, weather=weather_preset(scenario.weather))


# -- triggers -------------------------------------------------------------------------


def distance(a: Actor, b: Actor, metric: str = "planar") -> float:
    dx = a.position[0] - b.position[0]
    dy = a.position[1] - b.position[1]
    if metric == "planar":
        return math.hypot(dx, dy)
    return math.sqrt(dx * dx + dy * dy + (a.position[2] - b.position[2]) ** 2)


@dataclass
class TriggerState:
    fired: set = field(default_factory=set)
    fire_ticks: dict = field(default_factory=dict)  # actor id -> first firing tick


def evaluate_triggers(scenario: Scenario, world: World, state: TriggerState | None = None) -> list[tuple[int, Controls]]:
    """Controls to apply this tick.

    Untriggered actors get their idle controls. A trigger within range emits
    its controls; a one-shot trigger then latches and its actor is left
    alone afterwards (controls persist in the world). Repeating triggers
    revert to idle controls when the ego moves out of range.
    """
    state = state if state is not None else TriggerState()
    ego = world.ego
    out = []
    for sa in scenario.actors:
        try:
            actor = world.actor(sa.id)
        except KeyError:
            raise UnknownActor(f"scenario actor {sa.id} is not in the world") from None
        trig = sa.trigger
        if trig is None:
            if actor.controls != sa.idle_controls:
                out.append((sa.id, sa.idle_controls))
            continue
        if trig.one_shot and sa.id in state.fired:
            continue
        if distance(ego, actor, trig.metric) <= trig.distance_m:
            out.append((sa.id, trig.triggered_controls))
            state.fire_ticks.setdefault(sa.id, world.tick)
            if trig.one_shot:
                state.fired.add(sa.id)
        elif actor.controls != sa.idle_controls:
            out.append((sa.id, sa.idle_controls))
    return out


class ScenarioRunner:
    """Engine controller that applies trigger output each tick; see ``EngineService``."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.state = TriggerState()
        self.emitted: list[tuple[int, int, Controls]] = []  # (tick, actor id, controls)

    def __call__(self, world: World) -> dict:
        updates = evaluate_triggers(self.scenario, world, self.state)
        self.emitted.extend((world.tick, aid, c) for aid, c in updates)
        return dict(updates)

    @property
    def fire_ticks(self) -> dict:
        return dict(self.state.fire_ticks)


def play(scenario: Scenario, camera: CameraModel = CameraModel(), ticks: int | None = None):
    """Step the scenario without rendering; returns ``(runner, trajectory)`` of world states."""
    from g2r.mockengine import EngineService

    runner = ScenarioRunner(scenario)
    service = EngineService(build_world(scenario, camera), controller=runner, autopilot_speed=scenario.ego_speed)
    trajectory = [service.world]
    for _ in range(scenario.duration if ticks is None else ticks):
        trajectory.append(service.step())
    return runner, trajectory
