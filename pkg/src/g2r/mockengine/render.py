"""Ray-cast rasterizer for box actors over a ground plane, plus semantic lidar.

Every camera pixel and every lidar beam goes through ``cast_rays`` so the two
sensors agree on geometry by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from g2r.core import (
    NUM_CLASSES,
    GBufferId,
    GBufferSet,
    ImagePlane,
    SemanticClass,
    SemanticMap,
    stencil_plane,
)
from g2r.mockengine.world import ActorKind, World

SKY = SemanticClass.Sky
_VEG_OR_VEHICLE = (
    SemanticClass.Vegetation,
    SemanticClass.Terrain,
    SemanticClass.Car,
    SemanticClass.Truck,
    SemanticClass.Bus,
    SemanticClass.Train,
    SemanticClass.Motorcycle,
    SemanticClass.Bicycle,
)


def _material_tables():
    albedo = np.full((NUM_CLASSES, 3), 0.5, np.float32)
    metallic = np.zeros(NUM_CLASSES, np.float32)
    specular = np.full(NUM_CLASSES, 0.5, np.float32)
    roughness = np.full(NUM_CLASSES, 0.8, np.float32)
    colors = {
        SemanticClass.Road: (0.30, 0.30, 0.32),
        SemanticClass.RoadLine: (0.90, 0.90, 0.85),
        SemanticClass.Sidewalk: (0.60, 0.58, 0.55),
        SemanticClass.Building: (0.55, 0.45, 0.40),
        SemanticClass.Wall: (0.65, 0.62, 0.58),
        SemanticClass.Fence: (0.45, 0.40, 0.35),
        SemanticClass.Pole: (0.40, 0.40, 0.42),
        SemanticClass.TrafficLight: (0.20, 0.20, 0.15),
        SemanticClass.TrafficSign: (0.85, 0.80, 0.10),
        SemanticClass.Vegetation: (0.20, 0.45, 0.15),
        SemanticClass.Terrain: (0.35, 0.50, 0.25),
        SemanticClass.Pedestrian: (0.70, 0.30, 0.30),
        SemanticClass.Rider: (0.30, 0.30, 0.70),
        SemanticClass.Car: (0.15, 0.20, 0.60),
        SemanticClass.Truck: (0.70, 0.70, 0.70),
        SemanticClass.Bus: (0.80, 0.60, 0.10),
        SemanticClass.Train: (0.50, 0.50, 0.55),
        SemanticClass.Motorcycle: (0.10, 0.10, 0.10),
        SemanticClass.Bicycle: (0.60, 0.10, 0.10),
    }
    for cls, rgb in colors.items():
        albedo[cls] = rgb
    for cls in (SemanticClass.Car, SemanticClass.Truck, SemanticClass.Bus, SemanticClass.Train, SemanticClass.Motorcycle, SemanticClass.Bicycle):
        metallic[cls] = 0.8
        specular[cls] = 0.9
        roughness[cls] = 0.25
    metallic[SemanticClass.Pole] = 0.6
    metallic[SemanticClass.TrafficSign] = 0.3
    roughness[SemanticClass.Road] = 0.9
    specular[SemanticClass.Road] = 0.3
    albedo[SKY] = 0.0
    metallic[SKY] = specular[SKY] = roughness[SKY] = 0.0
    return albedo, metallic, specular, roughness


ALBEDO, METALLIC, SPECULAR, ROUGHNESS = _material_tables()
VEHICLE_METALLIC = float(METALLIC[SemanticClass.Car])
SUN_DIRECTION = np.array([0.3, -0.4, 0.866], np.float32) / np.linalg.norm([0.3, -0.4, 0.866])
AMBIENT = 0.35


@dataclass(frozen=True)
class RayHits:
    """Nearest intersection per ray. ``t`` is in units of the direction vectors."""

    t: np.ndarray
    class_ids: np.ndarray
    actor_ids: np.ndarray
    normals: np.ndarray
    height: np.ndarray  # hit point z above ground
    speed: np.ndarray
    hit: np.ndarray


@dataclass(frozen=True)
class SensorFrame:
    frame_id: int
    rgb: ImagePlane
    gbuffers: GBufferSet
    stencil: SemanticMap
    instance: np.ndarray  # (h, w) uint32 actor ids, 0 where no actor


@dataclass(frozen=True)
class LidarScan:
    frame_id: int
    points: np.ndarray  # structured array, see LIDAR_DTYPE

    def __len__(self):
        return len(self.points)

    def hits_per_actor(self) -> dict[int, int]:
        ids, counts = np.unique(self.points["actor_id"], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts) if i != 0}

    def to_bytes(self) -> bytes:
        return self.frame_id.to_bytes(8, "little") + len(self.points).to_bytes(4, "little") + self.points.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LidarScan":
        frame_id = int.from_bytes(data[:8], "little")
        n = int.from_bytes(data[8:12], "little")
        points = np.frombuffer(data[12:], dtype=LIDAR_DTYPE, count=n).copy()
        return cls(frame_id, points)

    def __eq__(self, other):
        return isinstance(other, LidarScan) and self.frame_id == other.frame_id and np.array_equal(self.points, other.points)


LIDAR_DTYPE = np.dtype(
    [("azimuth", "<f4"), ("elevation", "<f4"), ("range", "<f4"), ("class_id", "u1"), ("actor_id", "<u4")]
)


@dataclass(frozen=True)
class LidarConfig:
    n_azimuth: int = 360
    n_elevation: int = 16
    lower_deg: float = -25.0
    upper_deg: float = 5.0
    azimuth_span_deg: float = 360.0


def _rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_origin(world: World) -> np.ndarray:
    ego = world.ego
    base = np.array([ego.position[0], ego.position[1], ego.position[2] - ego.extent[2]])
    return base + _rotation(ego.heading) @ np.array(world.camera.offset)


@lru_cache(maxsize=8)
def _camera_dirs_local(width: int, height: int, focal: float) -> np.ndarray:
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    left = -(u - width / 2) / focal
    up = -(v - height / 2) / focal
    dirs = np.empty((height, width, 3))
    dirs[:, :, 0] = 1.0
    dirs[:, :, 1] = left[None, :]
    dirs[:, :, 2] = up[:, None]
    dirs.flags.writeable = False
    return dirs


def pixel_directions(world: World) -> np.ndarray:
    """World-space ray directions with unit forward component, shape (h, w, 3)."""
    cam = world.camera
    local = _camera_dirs_local(cam.width, cam.height, cam.focal)
    return local @ _rotation(world.ego.heading).T


def cast_rays(world: World, origin: np.ndarray, dirs: np.ndarray, t_min: float, t_max: float) -> RayHits:
    """Nearest hit among the ground plane and every non-ego actor box.

    Hits count only for ``t_min < t < t_max``. ``dirs`` has shape (..., 3).
    """
    shape = dirs.shape[:-1]
    d = dirs.reshape(-1, 3)
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    cls = np.full(n, SKY, np.uint8)
    actor_ids = np.zeros(n, np.uint32)
    normals = np.zeros((n, 3))
    height = np.zeros(n)
    speed = np.zeros(n)

    if world.road is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(d[:, 2] < 0, -origin[2] / d[:, 2], np.inf)
        ok = (t_ground > t_min) & (t_ground < t_max)
        best_t[ok] = t_ground[ok]
        ground_y = origin[1] + t_ground[ok] * d[ok, 1]
        cls[ok] = world.road.classify(ground_y)
        normals[ok] = (0.0, 0.0, 1.0)

    unit = d / np.linalg.norm(d, axis=1, keepdims=True)
    for actor in world.actors:
        if actor.kind == ActorKind.Ego:
            continue
        rot = _rotation(actor.heading)
        center = np.asarray(actor.position)
        ext = np.asarray(actor.extent)
        p = rot.T @ (origin - center)
        if np.all(np.abs(p) <= ext):
            continue  # sensor inside the box
        # bounding-sphere cull before the slab test
        q = center - origin
        radius = float(np.linalg.norm(ext))
        along = unit @ q
        near_sphere = (along > -radius) & (q @ q - along * along <= radius * radius * 1.0001 + 1e-9)
        cand = np.nonzero(near_sphere)[0]
        if cand.size == 0:
            continue
        dl = d[cand] @ rot  # == (rot.T @ d.T).T
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            t1 = (-ext - p) * inv
            t2 = (ext - p) * inv
        # a zero direction component makes the slab either everything or nothing
        parallel = dl == 0
        inside_slab = np.broadcast_to(np.abs(p) <= ext, dl.shape)
        lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        hit = (t_near <= t_far) & (t_near > t_min) & (t_near < t_max) & (t_near < best_t[cand])
        if not hit.any():
            continue
        sub = np.nonzero(hit)[0]
        idx = cand[sub]
        best_t[idx] = t_near[sub]
        cls[idx] = actor.class_id
        actor_ids[idx] = actor.id
        axis = lo[sub].argmax(axis=1)
        local_n = np.zeros((sub.size, 3))
        local_n[np.arange(sub.size), axis] = -np.sign(dl[sub, axis])
        normals[idx] = local_n @ rot.T
        height[idx] = origin[2] + t_near[sub] * d[idx, 2]
        speed[idx] = actor.speed

    hit = np.isfinite(best_t)
    cls[~hit] = SKY
    return RayHits(
        best_t.reshape(shape),
        cls.reshape(shape),
        actor_ids.reshape(shape),
        normals.reshape(shape + (3,)),
        height.reshape(shape),
        speed.reshape(shape),
        hit.reshape(shape),
    )


ALL_BUFFERS = tuple(b for b in GBufferId if b != GBufferId.CustomStencil)


def render_sensors(world: World, buffers=None) -> SensorFrame:
    """Render RGB, G-buffers, stencil and the actor-id plane for the current tick."""
    cam = world.camera
    wanted = set(ALL_BUFFERS if buffers is None else buffers)
    origin = camera_origin(world)
    hits = cast_rays(world, origin, pixel_directions(world), cam.near, cam.far)
    cls = hits.class_ids
    geo = hits.hit
    geo3 = geo[:, :, None]

    wet = world.weather.wetness
    albedo_table = ALBEDO.copy()
    specular_table = SPECULAR.copy()
    for road_cls in (SemanticClass.Road, SemanticClass.RoadLine, SemanticClass.Sidewalk):
        albedo_table[road_cls] *= 1.0 - 0.4 * wet
        specular_table[road_cls] = min(1.0, specular_table[road_cls] + 0.6 * wet)

    albedo = albedo_table[cls]
    depth = np.where(geo, np.minimum(hits.t / cam.far, np.nextafter(np.float32(1), np.float32(0))), 1.0)
    normals01 = np.where(geo3, (hits.normals + 1.0) * 0.5, 0.0)
    # contact darkening: surfaces close to the ground plane lose ambient light
    on_actor = hits.actor_ids != 0
    ssao = np.where(on_actor, 1.0 - 0.4 * np.clip(1.0 - hits.height / 0.5, 0.0, 1.0), 1.0)

    ndotl = np.clip(hits.normals @ SUN_DIRECTION, 0.0, 1.0)
    sun = world.weather.sun_intensity
    lit = albedo * (AMBIENT * ssao + sun * (1 - AMBIENT) * ndotl)[:, :, None]
    lit += (specular_table[cls] * wet * 0.15 * sun)[:, :, None] * geo3
    sky = np.asarray(world.weather.sky_color, np.float32)
    scene_color = np.clip(np.where(geo3, lit, sky), 0.0, 1.0)
    rgb = np.power(scene_color, 1 / 2.2)

    planes = {}

    def put(bid, array):
        if bid in wanted:
            planes[bid] = ImagePlane(array.astype(np.float32))

    put(GBufferId.SceneColor, scene_color)
    put(GBufferId.Albedo, albedo)
    if GBufferId.GBufferD in wanted:
        subsurface = np.isin(cls, _VEG_OR_VEHICLE)[:, :, None]
        put(GBufferId.GBufferD, np.where(subsurface, albedo * 0.6 + 0.1, 0.0))
    put(GBufferId.SSAO, ssao)
    put(GBufferId.Normals, normals01)
    put(GBufferId.Depth, depth)
    put(GBufferId.Metallic, METALLIC[cls])
    put(GBufferId.Specular, specular_table[cls])
    put(GBufferId.Roughness, ROUGHNESS[cls])
    if GBufferId.Velocity in wanted:
        v = np.clip(0.5 + hits.speed / 60.0, 0.0, 1.0)
        put(GBufferId.Velocity, np.stack([v, np.full_like(v, 0.5), np.full_like(v, 0.5)], axis=-1))
    for bid in (GBufferId.GBufferE, GBufferId.GBufferF):
        if bid in wanted:
            put(bid, np.zeros(cls.shape + (4,)))
    stencil = SemanticMap(cls)
    if GBufferId.CustomStencil in wanted:
        planes[GBufferId.CustomStencil] = stencil_plane(stencil)
    return SensorFrame(
        world.tick,
        ImagePlane(rgb.astype(np.float32)),
        GBufferSet(world.tick, planes),
        stencil,
        hits.actor_ids,
    )


def lidar_directions(world: World, cfg: LidarConfig) -> np.ndarray:
    span = math.radians(cfg.azimuth_span_deg)
    az = -span / 2 + (np.arange(cfg.n_azimuth) + 0.5) * span / cfg.n_azimuth
    if cfg.n_elevation == 1:
        el = np.array([math.radians((cfg.lower_deg + cfg.upper_deg) / 2)])
    else:
        el = np.radians(np.linspace(cfg.lower_deg, cfg.upper_deg, cfg.n_elevation))
    az_g, el_g = np.meshgrid(az, el)
    local = np.stack([np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=-1)
    return az_g, el_g, local @ _rotation(world.ego.heading).T


def lidar_scan(world: World, n_azimuth: int = 360, n_elevation: int = 16, cfg: LidarConfig | None = None, origin=None) -> LidarScan:
    """Semantic lidar mounted at the camera position; misses are omitted."""
    if n_azimuth < 1 or n_elevation < 1:
        raise ValueError("lidar needs at least one beam per axis")
    cfg = cfg or LidarConfig()
    cfg = LidarConfig(n_azimuth, n_elevation, cfg.lower_deg, cfg.upper_deg, cfg.azimuth_span_deg)
    origin = camera_origin(world) if origin is None else np.asarray(origin, float)
    az, el, dirs = lidar_directions(world, cfg)
    hits = cast_rays(world, origin, dirs, 0.0, world.camera.far + 1e-9)
    mask = hits.hit & (hits.t <= world.camera.far)
    points = np.zeros(int(mask.sum()), LIDAR_DTYPE)
    points["azimuth"] = az[mask]
    points["elevation"] = el[mask]
    points["range"] = hits.t[mask]
    points["class_id"] = hits.class_ids[mask]
    points["actor_id"] = hits.actor_ids[mask]
    return LidarScan(world.tick, points)
