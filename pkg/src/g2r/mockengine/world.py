"""World state and fixed-step kinematics for the procedural engine."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from g2r.core import SemanticClass
from g2r.errors import G2RError

FIXED_DT = 0.05


class UnknownPreset(G2RError):
    pass


class ActorKind(enum.Enum):
    Ego = "ego"
    Vehicle = "vehicle"
    Pedestrian = "pedestrian"
    StaticProp = "static_prop"
    TrafficLight = "traffic_light"


@dataclass(frozen=True)
class Controls:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        for name, lo in (("throttle", 0.0), ("brake", 0.0), ("steer", -1.0)):
            value = float(getattr(self, name))
            if not lo <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [{lo}, 1]")
            object.__setattr__(self, name, value)

    def as_dict(self) -> dict:
        return {"throttle": self.throttle, "brake": self.brake, "steer": self.steer}


@dataclass(frozen=True)
class Dynamics:
    a_max: float  # m/s^2 at full throttle
    b_max: float  # m/s^2 at full brake
    v_max: float  # m/s
    steer_rate: float  # rad/s at full steer


DYNAMICS = {
    ActorKind.Ego: Dynamics(3.0, 8.0, 30.0, 0.7),
    ActorKind.Vehicle: Dynamics(3.0, 8.0, 30.0, 0.7),
    ActorKind.Pedestrian: Dynamics(2.0, 4.0, 3.0, 1.5),
    ActorKind.StaticProp: Dynamics(0.0, 0.0, 0.0, 0.0),
    ActorKind.TrafficLight: Dynamics(0.0, 0.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class Actor:
    id: int
    class_id: int
    kind: ActorKind
    position: tuple[float, float, float]  # box center, metres
    heading: float = 0.0  # rad, counter-clockwise from +x
    extent: tuple[float, float, float] = (1.0, 1.0, 1.0)  # half sizes
    speed: float = 0.0  # m/s along heading
    controls: Controls = Controls()
    light_cycle: tuple[int, int] | None = None  # (green_ticks, red_ticks)

    def __post_init__(self):
        if any(e <= 0 for e in self.extent):
            raise ValueError(f"actor {self.id}: extent components must be positive")

    @property
    def xy(self) -> tuple[float, float]:
        return self.position[0], self.position[1]

    def light_state(self, tick: int) -> str | None:
        if self.light_cycle is None:
            return None
        green, red = self.light_cycle
        return "green" if tick % (green + red) < green else "red"


@dataclass(frozen=True)
class CameraModel:
    width: int = 960
    height: int = 540
    horizontal_fov: float = math.radians(90.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 1.6)  # relative to ego center-bottom
    near: float = 0.1
    far: float = 200.0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("camera needs 0 < near < far")
        if not 0 < self.horizontal_fov < math.pi:
            raise ValueError("horizontal_fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be positive")

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(self.horizontal_fov / 2)


FAST_CAMERA = CameraModel(192, 108)


@dataclass(frozen=True)
class WeatherPreset:
    name: str
    sun_intensity: float
    sky_color: tuple[float, float, float]
    cloudiness: float = 0.0
    wetness: float = 0.0


def _preset(name: str) -> WeatherPreset:
    sunset = "Sunset" in name
    cloud = 0.0
    if "Cloudy" in name:
        cloud = 0.6
    if "Rain" in name or name == "Fog":
        cloud = 0.8
    wet = 0.0
    if "Wet" in name:
        wet = 0.5
    for level, value in (("Soft", 0.6), ("Mid", 0.8), ("Hard", 1.0)):
        if name.startswith(level):
            wet = value
    sun = (0.6 if sunset else 1.0) * (1.0 - 0.6 * cloud)
    base = (0.85, 0.55, 0.40) if sunset else (0.45, 0.65, 0.95)
    gray = 0.7 if name == "Fog" else 0.6
    sky = tuple(round(c * (1 - cloud) + gray * cloud, 4) for c in base)
    return WeatherPreset(name, round(sun, 4), sky, cloud, wet)


PRESET_NAMES = (
    "ClearNoon",
    "CloudyNoon",
    "WetNoon",
    "WetCloudyNoon",
    "SoftRainNoon",
    "MidRainNoon",
    "HardRainNoon",
    "ClearSunset",
    "CloudySunset",
    "WetSunset",
    "WetCloudySunset",
    "SoftRainSunset",
    "MidRainSunset",
    "HardRainSunset",
    "Fog",
)
WEATHER_PRESETS = {name: _preset(name) for name in PRESET_NAMES}


def weather_preset(name: str) -> WeatherPreset:
    try:
        return WEATHER_PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown weather preset {name!r}; known: {', '.join(PRESET_NAMES)}") from None


@dataclass(frozen=True)
class RoadLayout:
    """Straight road along the world x axis; the ground class depends on |y|."""

    half_width: float = 7.0
    line_half_width: float = 0.1
    sidewalk_width: float = 3.0

    def classify(self, y: np.ndarray) -> np.ndarray:
        ay = np.abs(y)
        out = np.full(ay.shape, SemanticClass.Terrain, np.uint8)
        out[ay <= self.half_width + self.sidewalk_width] = SemanticClass.Sidewalk
        out[ay <= self.half_width] = SemanticClass.Road
        out[ay <= self.line_half_width] = SemanticClass.RoadLine
        return out


@dataclass(frozen=True)
class World:
    seed: int
    tick: int = 0
    actors: tuple[Actor, ...] = ()
    camera: CameraModel = CameraModel()
    weather: WeatherPreset = WEATHER_PRESETS["ClearNoon"]
    fixed_dt: float = FIXED_DT
    town_profile: str = "procedural"
    road: RoadLayout | None = RoadLayout()  # None: no ground plane at all

    def __post_init__(self):
        if self.fixed_dt <= 0:
            raise ValueError("fixed_dt must be positive")
        egos = [a for a in self.actors if a.kind == ActorKind.Ego]
        if len(egos) != 1:
            raise ValueError(f"world needs exactly one ego actor, found {len(egos)}")
        ids = [a.id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ValueError("actor ids must be unique")

    @property
    def ego(self) -> Actor:
        return next(a for a in self.actors if a.kind == ActorKind.Ego)

    def actor(self, actor_id: int) -> Actor:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise KeyError(actor_id)

    def geometry_key(self) -> tuple:
        """Everything rendering depends on; equal keys give identical sensor output."""
        return (self.actors, self.camera, self.weather, self.road)

    def with_controls(self, updates: dict[int, Controls]) -> "World":
        actors = tuple(replace(a, controls=updates[a.id]) if a.id in updates else a for a in self.actors)
        return replace(self, actors=actors)


def step_actor(actor: Actor, dt: float) -> Actor:
    dyn = DYNAMICS[actor.kind]
    if dyn.v_max == 0.0:
        return actor
    x, y, z = actor.position
    x += actor.speed * math.cos(actor.heading) * dt
    y += actor.speed * math.sin(actor.heading) * dt
    c = actor.controls
    speed = min(max(actor.speed + (c.throttle * dyn.a_max - c.brake * dyn.b_max) * dt, 0.0), dyn.v_max)
    heading = actor.heading + c.steer * dyn.steer_rate * dt
    return replace(actor, position=(x, y, z), speed=speed, heading=heading)


def tick(world: World) -> World:
    actors = tuple(step_actor(a, world.fixed_dt) for a in world.actors)
    return replace(world, tick=world.tick + 1, actors=actors)


def apply_weather(world: World, preset: str | WeatherPreset) -> World:
    if isinstance(preset, str):
        preset = weather_preset(preset)
    elif preset.name not in WEATHER_PRESETS:
        raise UnknownPreset(preset.name)
    return replace(world, weather=preset)


# -- procedural scenes -------------------------------------------------------------

_CLASS_SHAPES = {
    SemanticClass.Car: (2.2, 0.9, 0.75),
    SemanticClass.Truck: (4.0, 1.2, 1.6),
    SemanticClass.Bus: (5.5, 1.3, 1.6),
    SemanticClass.Motorcycle: (1.0, 0.4, 0.7),
    SemanticClass.Bicycle: (0.9, 0.3, 0.6),
    SemanticClass.Pedestrian: (0.3, 0.3, 0.9),
    SemanticClass.Rider: (0.35, 0.35, 0.95),
}


def make_ego(actor_id: int = 1, x: float = 0.0, y: float = -3.5, heading: float = 0.0) -> Actor:
    return Actor(actor_id, SemanticClass.Car, ActorKind.Ego, (x, y, 0.75), heading, (2.2, 0.9, 0.75))


def random_world(
    seed: int,
    camera: CameraModel = CameraModel(),
    *,
    n_vehicles: int = 6,
    n_pedestrians: int = 4,
    n_props: int = 8,
    weather: str = "ClearNoon",
    town_profile: str = "procedural",
    ego: Actor | None = None,
) -> World:
    """Seeded street scene: traffic on the road, people on sidewalks, buildings and trees beyond."""
    rng = np.random.default_rng(seed)
    road = RoadLayout()
    actors = [ego or make_ego()]
    next_id = 2

    def add(class_id, kind, x, y, heading=0.0, extent=None, **kw):
        nonlocal next_id
        extent = extent or _CLASS_SHAPES.get(class_id, (1.0, 1.0, 1.0))
        actors.append(Actor(next_id, int(class_id), kind, (float(x), float(y), float(extent[2])), float(heading), extent, **kw))
        next_id += 1

    vehicle_classes = [
        SemanticClass.Car,
        SemanticClass.Car,
        SemanticClass.Truck,
        SemanticClass.Bus,
        SemanticClass.Motorcycle,
        SemanticClass.Bicycle,
    ]
    for _ in range(n_vehicles):
        cls = vehicle_classes[rng.integers(len(vehicle_classes))]
        lane = rng.choice([-3.5, 3.5])
        heading = 0.0 if lane < 0 else math.pi
        add(cls, ActorKind.Vehicle, rng.uniform(10, 80), lane + rng.uniform(-0.5, 0.5), heading + rng.uniform(-0.1, 0.1))
    for _ in range(n_pedestrians):
        cls = SemanticClass.Pedestrian if rng.random() < 0.8 else SemanticClass.Rider
        side = rng.choice([-1, 1])
        y = side * (road.half_width + rng.uniform(0.5, road.sidewalk_width - 0.5))
        add(cls, ActorKind.Pedestrian, rng.uniform(6, 50), y, rng.uniform(-math.pi, math.pi))
    prop_kinds = [
        (SemanticClass.Building, (6.0, 4.0, 8.0)),
        (SemanticClass.Vegetation, (1.5, 1.5, 3.0)),
        (SemanticClass.Pole, (0.15, 0.15, 3.0)),
        (SemanticClass.TrafficSign, (0.1, 0.5, 0.5)),
        (SemanticClass.Fence, (4.0, 0.1, 0.6)),
        (SemanticClass.Wall, (5.0, 0.3, 1.5)),
    ]
    for _ in range(n_props):
        cls, extent = prop_kinds[rng.integers(len(prop_kinds))]
        side = rng.choice([-1, 1])
        offset = road.half_width + road.sidewalk_width + extent[1] + rng.uniform(0.5, 6.0)
        if cls in (SemanticClass.Pole, SemanticClass.TrafficSign):
            offset = road.half_width + 1.0
        pos_z = extent[2] + (2.5 if cls == SemanticClass.TrafficSign else 0.0)
        actors.append(
            Actor(next_id, int(cls), ActorKind.StaticProp, (float(rng.uniform(5, 90)), float(side * offset), pos_z), 0.0, extent)
        )
        next_id += 1
    light_extent = (0.2, 0.2, 0.6)
    actors.append(
        Actor(
            next_id,
            SemanticClass.TrafficLight,
            ActorKind.TrafficLight,
            (float(rng.uniform(30, 60)), -(road.half_width + 1.0), 3.5),
            0.0,
            light_extent,
            light_cycle=(100, 60),
        )
    )
    return World(
        seed=seed,
        actors=tuple(actors),
        camera=camera,
        weather=weather_preset(weather),
        town_profile=town_profile,
        road=road,
    )


def status_records(world: World) -> tuple[dict, dict]:
    """Vehicle and world status for the ego at the current tick."""
    ego = world.ego
    vehicle = {
        "steer": ego.controls.steer,
        "throttle": ego.controls.throttle,
        "brake": ego.controls.brake,
        "speed_mps": abs(ego.speed),
    }
    world_info = {
        "weather": world.weather.name,
        "tick": world.tick,
        "seed": world.seed,
        "town_profile": world.town_profile,
        "traffic_lights": {str(a.id): a.light_state(world.tick) for a in world.actors if a.light_cycle is not None},
    }
    return vehicle, world_info
