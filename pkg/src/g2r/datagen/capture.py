"""Capture consumer for the pipeline and a one-call capture run against the mock engine."""

from __future__ import annotations

import threading
from dataclasses import replace
from pathlib import Path

from g2r.datagen.boxes import FrameIdMismatch, generate_boxes
from g2r.datagen.writer import CaptureConfig, Manifest, should_capture, write_capture
from g2r.errors import G2RError


class CaptureConfigError(G2RError):
    pass


class Capturer:
    """Pipeline consumer that writes every ``every_n``-th delivered frame."""

    def __init__(self, cfg: CaptureConfig):
        self.cfg = cfg
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(cfg.out_dir)
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def boxes_for(self, bundle):
        if "boxes" not in self.cfg.products:
            return None
        if bundle.instance is None:
            raise CaptureConfigError("boxes need the instance stream")
        lidar = None
        if bundle.lidar is not None:
            from g2r.mockengine.render import LidarScan

            lidar = LidarScan.from_bytes(bundle.lidar)
        return generate_boxes(
            bundle.semantics,
            bundle.instance,
            lidar,
            min_box_area=self.cfg.min_box_area,
            occlusion_min_points=self.cfg.occlusion_min_points,
            classes=self.cfg.class_table,
            frame_id=bundle.frame_id,
        )

    def __call__(self, result):
        if not should_capture(result.frame_id, self.cfg.every_n):
            return
        bundle = result.bundle
        if bundle.frame_id != result.frame_id or result.enhancer_input.frame_id != result.frame_id:
            raise FrameIdMismatch(f"result {result.frame_id} pairs bundle {bundle.frame_id} with input {result.enhancer_input.frame_id}")
        entry = write_capture(bundle, result.enhanced, self.boxes_for(bundle), self.cfg, self.manifest)
        with self._lock:
            self.entries.append(entry)


def check_cadence(every_n: int, skip: int):
    if every_n % (skip + 1):
        raise CaptureConfigError(f"every_n={every_n} is not a multiple of skip+1={skip + 1}; captures would never line up with inferred frames")


def run_capture(world, pipeline_config, capture_config: CaptureConfig, ticks: int, *, controller=None, autopilot_speed=None, lidar=None, enhancer=None):
    """Serve ``world`` in-process, run the pipeline for ``ticks`` ticks and capture.

    Returns ``(stats, entries)``.
    """
    from g2r.mockengine import EngineService, LidarConfig
    from g2r.pipeline import open_session, run_pipeline
    from g2r.wire.transport import serve

    if pipeline_config.mode != "sync":
        raise CaptureConfigError("dataset capture runs in synchronous mode only")
    check_cadence(capture_config.every_n, pipeline_config.skip)
    if pipeline_config.target_res is not None and tuple(pipeline_config.target_res) != (world.camera.width, world.camera.height):
        raise CaptureConfigError("capture keeps labels aligned with the frame, so target_res must match the camera")
    extras = tuple(dict.fromkeys(tuple(pipeline_config.subscribe) + capture_config.stream_extras))
    cfg = replace(pipeline_config, subscribe=extras)
    service = EngineService(world, lidar=lidar or LidarConfig(), controller=controller, autopilot_speed=autopilot_speed)
    capturer = Capturer(capture_config)
    endpoint = f"inproc://capture-{id(capturer)}"
    with serve(service, endpoint, cfg.mode, info=service.info, on_control=service.on_control, max_frames=ticks):
        session = open_session(endpoint, cfg)
        stats = run_pipeline(cfg, session, capturer, enhancer=enhancer, max_ticks=ticks)
    entries = sorted(capturer.entries, key=lambda e: e["frame_id"])
    return stats, entries
