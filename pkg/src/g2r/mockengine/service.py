"""Adapts a World to the wire server's engine callback."""

from __future__ import annotations

import json
import threading
from dataclasses import replace

from g2r.core import GBufferId
from g2r.mockengine.render import LidarConfig, lidar_scan, render_sensors
from g2r.mockengine.world import Controls, World, status_records, tick
from g2r.wire.codec import Sensor, WirePrecision, array_message, plane_message, raw_message


class EngineService:
    """Renders the subscribed sensors for the current tick, then advances the world.

    ``controller`` is called with the world before each step and may return
    ``{actor_id: Controls}`` overrides (scenario triggers use this).
    ``autopilot_speed`` keeps the ego cruising at a target speed unless the
    client takes over with a ControlCommand.
    """

    def __init__(
        self,
        world: World,
        *,
        lidar: LidarConfig = LidarConfig(),
        controller=None,
        autopilot_speed: float | None = None,
    ):
        self.world = world
        self.lidar = lidar
        self.controller = controller
        self.autopilot_speed = autopilot_speed
        self._manual: Controls | None = None
        self._lock = threading.Lock()
        self._cache_key = None
        self._cache_frame = None

    @property
    def info(self) -> dict:
        cam = self.world.camera
        return {
            "width": cam.width,
            "height": cam.height,
            "fixed_dt": self.world.fixed_dt,
            "seed": self.world.seed,
            "weather": self.world.weather.name,
        }

    def on_control(self, command: dict):
        with self._lock:
            self._manual = Controls(
                float(command.get("throttle", 0.0)),
                float(command.get("brake", 0.0)),
                float(command.get("steer", 0.0)),
            )

    def _ego_controls(self, world: World) -> Controls | None:
        if self._manual is not None:
            return self._manual
        if self.autopilot_speed is None:
            return None
        v = world.ego.speed
        if v < self.autopilot_speed:
            return Controls(throttle=min(1.0, (self.autopilot_speed - v) / 3.0))
        if v > self.autopilot_speed + 0.5:
            return Controls(brake=min(1.0, (v - self.autopilot_speed) / 8.0))
        return Controls()

    def step(self) -> World:
        with self._lock:
            world = self.world
            updates = {}
            if self.controller is not None:
                updates.update(self.controller(world) or {})
            ego = self._ego_controls(world)
            if ego is not None:
                updates[world.ego.id] = ego
            if updates:
                world = world.with_controls(updates)
            self.world = tick(world)
            return self.world

    def messages(self, keys) -> list:
        world = self.world
        frame_id = world.tick
        sensors = {s for s, _ in keys}
        gbuffer_ids = sorted(g for s, g in keys if s == Sensor.GBuffer)
        msgs = []
        need_frame = sensors & {Sensor.Rgb, Sensor.Stencil, Sensor.Instance} or gbuffer_ids
        if need_frame:
            frame = self._render(world, tuple(gbuffer_ids))
            if Sensor.Rgb in sensors:
                msgs.append(plane_message(Sensor.Rgb, frame_id, frame.rgb, WirePrecision.U8))
            for gid in gbuffer_ids:
                precision = WirePrecision.U8 if gid == GBufferId.CustomStencil else WirePrecision.F32
                msgs.append(plane_message(Sensor.GBuffer, frame_id, frame.gbuffers[gid], precision, gid))
            if Sensor.Stencil in sensors:
                msgs.append(array_message(Sensor.Stencil, frame_id, frame.stencil.class_ids, WirePrecision.U8))
            if Sensor.Instance in sensors:
                msgs.append(array_message(Sensor.Instance, frame_id, frame.instance, WirePrecision.U32))
        if Sensor.Lidar in sensors:
            scan = lidar_scan(world, self.lidar.n_azimuth, self.lidar.n_elevation, self.lidar)
            msgs.append(raw_message(Sensor.Lidar, frame_id, scan.to_bytes()))
        if Sensor.VehicleStatus in sensors:
            vehicle, world_info = status_records(world)
            body = json.dumps({"vehicle": vehicle, "world": world_info}, sort_keys=True).encode()
            msgs.append(raw_message(Sensor.VehicleStatus, frame_id, body))
        return msgs

    def _render(self, world: World, gbuffer_ids: tuple):
        # a static scene renders identically every tick; only the frame id moves
        key = (world.geometry_key(), gbuffer_ids)
        if key != self._cache_key:
            self._cache_frame = render_sensors(world, gbuffer_ids)
            self._cache_key = key
        frame = self._cache_frame
        if frame.frame_id != world.tick:
            frame = replace(frame, frame_id=world.tick, gbuffers=replace(frame.gbuffers, frame_id=world.tick))
        return frame

    def __call__(self, keys) -> tuple[int, list]:
        """Engine callback: sensor messages for the current frame, then one world step."""
        frame_id = self.world.tick
        msgs = self.messages(keys)
        self.step()
        return frame_id, msgs
