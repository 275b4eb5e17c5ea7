import json
import math
from pathlib import Path

import numpy as np
import pytest

from g2r.core import GBufferId, ImagePlane, SemanticClass, SemanticMap
from g2r.datagen import (
    DETECTION_CLASSES,
    CaptureConfig,
    CaptureConfigError,
    CaptureIoError,
    ContainerError,
    FrameIdMismatch,
    Manifest,
    MissingProduct,
    VocRecord,
    capture_count,
    decode_container,
    encode_container,
    encode_depth,
    generate_boxes,
    read_depth,
    read_matrix,
    read_semantic,
    read_voc_xml,
    run_capture,
    should_capture,
    write_capture,
    write_matrix,
    write_status_json,
    write_voc_xml,
)
from g2r.datagen.writer import encode_semantic
from g2r.errors import DimensionMismatch
from g2r.mockengine import (
    FAST_CAMERA,
    Actor,
    ActorKind,
    Controls,
    LidarConfig,
    World,
    lidar_scan,
    make_ego,
    random_world,
    render_sensors,
    tick,
)
from g2r.mockengine.render import camera_origin, lidar_directions
from g2r.pipeline import FrameBundle, PipelineConfig
from test_mockengine import slab_hit

GOLDEN = Path(__file__).parent / "golden"


def pixel_scan_oracle(stencil, instance, min_area, width, height):
    """Brute force: walk every pixel, grow per-(class, actor) extents."""
    ext = {}
    cls_rows = stencil.tolist()
    id_rows = instance.tolist()
    for y in range(height):
        for x in range(width):
            c, a = cls_rows[y][x], id_rows[y][x]
            if a == 0 or c not in DETECTION_CLASSES:
                continue
            e = ext.setdefault((c, a), [x, y, x, y, 0])
            e[0], e[1] = min(e[0], x), min(e[1], y)
            e[2], e[3] = max(e[2], x), max(e[3], y)
            e[4] += 1
    out = set()
    for (c, a), (x0, y0, x1, y1, n) in ext.items():
        if n >= min_area:
            trunc = x0 == 0 or y0 == 0 or x1 == width - 1 or y1 == height - 1
            out.add((DETECTION_CLASSES[c], a, x0, y0, x1, y1, trunc))
    return out


def lidar_count_oracle(points, actor_id):
    return sum(1 for p in points.tolist() if p[4] == actor_id)


class TestCadence:
    def test_every_20_over_100(self):
        assert sum(should_capture(t, 20) for t in range(100)) == 5

    def test_every_tick(self):
        assert all(should_capture(t, 1) for t in range(50))

    def test_indices(self):
        assert [t for t in range(200) if should_capture(t, 20)] == list(range(0, 200, 20))

    def test_count_is_ceiling(self):
        for ticks in range(1, 120):
            for n in (1, 3, 20):
                assert capture_count(ticks, n) == math.ceil(ticks / n)

    def test_bad_every_n(self):
        with pytest.raises(ValueError):
            should_capture(0, 0)
        with pytest.raises(ValueError):
            CaptureConfig(every_n=0)
        with pytest.raises(ValueError):
            CaptureConfig(min_box_area=0)
        with pytest.raises(ValueError):
            CaptureConfig(products={"frames"})


class TestBoxes:
    def test_single_block(self):
        stencil = np.zeros((30, 40), np.uint8)
        ids = np.zeros((30, 40), np.uint32)
        stencil[5:16, 10:21] = SemanticClass.Car
        ids[5:16, 10:21] = 7
        [rec] = generate_boxes(SemanticMap(stencil), ids)
        assert rec.box == (10, 5, 20, 15)
        assert rec.class_name == "vehicle" and not rec.truncated and not rec.occluded
        assert rec.pixels == 121

    def test_no_pixels_no_box(self):
        stencil = np.full((10, 10), SemanticClass.Building, np.uint8)
        assert generate_boxes(SemanticMap(stencil), np.full((10, 10), 3, np.uint32)) == []

    def test_adjacent_same_class_split_by_actor(self):
        stencil = np.full((10, 20), SemanticClass.Pedestrian, np.uint8)
        ids = np.zeros((10, 20), np.uint32)
        ids[:, :10], ids[:, 10:] = 4, 5
        recs = generate_boxes(SemanticMap(stencil), ids)
        assert [r.box for r in recs] == [(0, 0, 9, 9), (10, 0, 19, 9)]
        assert all(r.truncated for r in recs)

    def test_min_area_counts_pixels(self):
        stencil = np.zeros((10, 10), np.uint8)
        ids = np.zeros((10, 10), np.uint32)
        stencil[2, 2] = stencil[7, 7] = SemanticClass.Bus
        ids[2, 2] = ids[7, 7] = 9
        assert generate_boxes(SemanticMap(stencil), ids, min_box_area=3) == []
        [rec] = generate_boxes(SemanticMap(stencil), ids, min_box_area=2)
        assert rec.box == (2, 2, 7, 7)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            generate_boxes(SemanticMap(np.zeros((4, 4), np.uint8)), np.zeros((4, 5), np.uint32))

    def test_lidar_frame_mismatch(self):
        world = random_world(1, FAST_CAMERA)
        frame = render_sensors(world)
        scan = lidar_scan(tick(world))
        with pytest.raises(FrameIdMismatch):
            generate_boxes(frame.stencil, frame.instance, scan, frame_id=frame.frame_id)

    def test_seeded_scenes_match_pixel_scan_oracle(self):
        cam = FAST_CAMERA
        for seed in range(100):
            world = random_world(seed, cam)
            frame = render_sensors(world)
            scan = lidar_scan(world)
            recs = generate_boxes(frame.stencil, frame.instance, scan, min_box_area=4, occlusion_min_points=2, frame_id=0)
            got = {(r.class_name, r.actor_id, *r.box, r.truncated) for r in recs}
            assert got == pixel_scan_oracle(frame.stencil.class_ids, frame.instance, 4, cam.width, cam.height), seed
            for r in recs:
                assert r.occluded == (lidar_count_oracle(scan.points, r.actor_id) < 2)

    def test_mostly_hidden_vehicle_is_flagged_occluded(self):
        ego = make_ego()
        o = camera_origin(World(seed=0, actors=(ego,), camera=FAST_CAMERA, road=None))
        wall = Actor(2, SemanticClass.Wall, ActorKind.StaticProp, (o[0] + 8, o[1], o[2]), 0.0, (0.3, 2.0, 3.0))
        car = Actor(3, SemanticClass.Car, ActorKind.Vehicle, (o[0] + 16, o[1] + 2.85, 0.75), 0.0, (2.2, 0.9, 0.75))
        world = World(seed=0, actors=(ego, wall, car), camera=FAST_CAMERA, road=None)
        frame = render_sensors(world)
        visible = int((frame.instance == 3).sum())
        assert 0 < visible < 0.1 * 44 * 10  # a sliver of the car's unoccluded footprint
        # ray oracle: no lidar beam reaches the car before something else
        _, _, dirs = lidar_directions(world, LidarConfig())
        reaching = 0
        for d in dirs.reshape(-1, 3).tolist():
            t_car = slab_hit(o, d, car)
            if t_car is None:
                continue
            t_wall = slab_hit(o, d, wall)
            if t_wall is None or t_wall > t_car:
                reaching += 1
        assert reaching == 0
        [rec] = generate_boxes(frame.stencil, frame.instance, lidar_scan(world), min_box_area=visible, frame_id=0)
        assert rec.occluded and rec.class_name == "vehicle" and rec.pixels == visible

    def test_class_filter(self):
        world = random_world(11, FAST_CAMERA)
        frame = render_sensors(world)
        cars = {c: n for c, n in DETECTION_CLASSES.items() if n == "vehicle"}
        recs = generate_boxes(frame.stencil, frame.instance, classes=cars)
        assert recs and {r.class_name for r in recs} == {"vehicle"}


class TestVoc:
    def test_empty(self):
        meta, recs = read_voc_xml(write_voc_xml([], {"width": 4, "height": 3}))
        assert recs == [] and meta["width"] == 4 and meta["height"] == 3

    def test_one_based(self):
        xml = write_voc_xml([VocRecord("vehicle", 10, 5, 20, 15)], {"width": 64, "height": 32})
        assert b"<xmin>11</xmin>" in xml and b"<ymin>6</ymin>" in xml
        assert b"<xmax>21</xmax>" in xml and b"<ymax>16</ymax>" in xml
        _, [rec] = read_voc_xml(xml)
        assert rec.box == (10, 5, 20, 15)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            VocRecord("car", 0, 0, 1, 1)
        with pytest.raises(ValueError):
            VocRecord("vehicle", 5, 0, 4, 1)

    def test_golden_fixture_scene(self):
        world = random_world(11, FAST_CAMERA)
        frame = render_sensors(world)
        recs = generate_boxes(frame.stencil, frame.instance, lidar_scan(world), min_box_area=4, frame_id=0)
        xml = write_voc_xml(recs, {"filename": "00000000_frame.png", "width": 192, "height": 108})
        assert xml == (GOLDEN / "voc_seed11.xml").read_bytes()


class TestContainer:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        planes = [(0, rng.random((5, 7, 3), np.float32)), (5, rng.random((5, 7, 1), np.float32))]
        got, label = decode_container(encode_container(planes, "x"))
        assert label == "x"
        for (i, a), (j, b) in zip(planes, got):
            assert i == j and np.array_equal(a, b)

    def test_header_layout(self):
        data = encode_container([(3, np.zeros((2, 4, 1), np.float32))])
        assert data[:4] == b"G2RB"
        assert int.from_bytes(data[4:6], "little") == 1
        assert int.from_bytes(data[6:10], "little") == 4
        assert int.from_bytes(data[10:14], "little") == 2
        assert len(data) == 18 + 2 + 2 * 4 * 4

    def test_corrupt(self):
        data = encode_container([(0, np.zeros((2, 2, 1), np.float32))])
        for bad in (b"", b"XXXX" + data[4:], data[:-1]):
            with pytest.raises(ContainerError):
                decode_container(bad)

    def test_matrix(self, tmp_path):
        m = np.random.default_rng(1).standard_normal((10, 8)).astype(np.float32)
        write_matrix(tmp_path / "f.g2r", m, "sim")
        got, label = read_matrix(tmp_path / "f.g2r")
        assert label == "sim" and np.array_equal(got, m)


class TestFiles:
    def test_depth_bound(self, tmp_path):
        rng = np.random.default_rng(2)
        depth = ImagePlane(rng.random((50, 60), np.float32))
        (tmp_path / "d.png").write_bytes(encode_depth(depth))
        back = read_depth(tmp_path / "d.png")
        assert np.abs(back - depth.data[:, :, 0].astype(np.float64)).max() <= 1 / 65535

    def test_semantic_lossless(self, tmp_path):
        sem = SemanticMap(np.random.default_rng(3).integers(0, 29, (40, 50)))
        (tmp_path / "s.png").write_bytes(encode_semantic(sem))
        assert read_semantic(tmp_path / "s.png") == sem

    def test_status_at_rest(self):
        world = World(seed=5, actors=(make_ego(),))
        vehicle, info = map(json.loads, write_status_json(world))
        assert vehicle == {"steer": 0, "throttle": 0, "brake": 0, "speed_mps": 0}
        assert info == {"weather": "ClearNoon", "tick": 0, "seed": 5, "town_profile": "procedural", "traffic_lights": {}}

    def test_status_reports_light_state(self):
        light = Actor(4, SemanticClass.TrafficLight, ActorKind.TrafficLight, (20.0, -6.0, 3.5), 0.0, (0.2, 0.2, 0.6), light_cycle=(2, 3))
        world = World(seed=0, actors=(make_ego(), light))
        states = []
        for _ in range(6):
            states.append(json.loads(write_status_json(world)[1])["traffic_lights"]["4"])
            world = tick(world)
        assert states == ["green", "green", "red", "red", "red", "green"]

    def test_status_speed_matches_kinematics(self):
        world = World(seed=0, actors=(make_ego(),)).with_controls({1: Controls(throttle=1.0)})
        for _ in range(10):
            world = tick(world)
        vehicle, _ = map(json.loads, write_status_json(world))
        assert vehicle["speed_mps"] == pytest.approx(abs(world.ego.speed))
        assert vehicle["speed_mps"] > 0


def small_bundle(frame_id=0, status=True):
    frame = render_sensors(random_world(6, FAST_CAMERA))
    return FrameBundle(
        frame_id,
        frame.rgb,
        frame.gbuffers,
        frame.stencil,
        instance=frame.instance,
        status={"vehicle": {"speed_mps": 0.0}, "world": {"tick": frame_id}} if status else None,
    )


class TestWriteCapture:
    def test_eight_files_and_manifest(self, tmp_path):
        cfg = CaptureConfig(out_dir=str(tmp_path))
        manifest = Manifest(tmp_path)
        for fid in (0, 20, 40):
            b = small_bundle(fid)
            write_capture(b, b.rgb, [], cfg, manifest)
        entries = manifest.read()
        assert len(entries) == 3
        files = sorted(p.name for p in tmp_path.iterdir() if p.name != "manifest.jsonl")
        assert len(files) == 24
        assert sorted(f for e in entries for f in e["files"].values()) == files
        assert files[0].startswith("00000000_")

    def test_missing_enhanced(self, tmp_path):
        with pytest.raises(MissingProduct):
            write_capture(small_bundle(), None, [], CaptureConfig(out_dir=str(tmp_path)))

    def test_missing_status(self, tmp_path):
        b = small_bundle(status=False)
        with pytest.raises(MissingProduct):
            write_capture(b, b.rgb, [], CaptureConfig(out_dir=str(tmp_path)))

    def test_io_error_cleans_stem(self, tmp_path):
        b = small_bundle(0)
        cfg = CaptureConfig(out_dir=str(tmp_path))
        (tmp_path / "00000000_world.json").mkdir()  # last file in write order cannot be written
        with pytest.raises(CaptureIoError):
            write_capture(b, b.rgb, [], cfg)
        assert [p.name for p in tmp_path.iterdir()] == ["00000000_world.json"]

    def test_depth_file_from_bundle(self, tmp_path):
        b = small_bundle(0)
        entry = write_capture(b, b.rgb, [], CaptureConfig(out_dir=str(tmp_path), products={"depth"}))
        back = read_depth(tmp_path / entry["files"]["depth"])
        assert np.abs(back - b.gbuffers[GBufferId.Depth].data[:, :, 0]).max() <= 1 / 65535


class TestCaptureRun:
    def test_400_ticks_every_20(self, tmp_path):
        out = tmp_path / "cap"
        stats, entries = run_capture(
            random_world(3, FAST_CAMERA), PipelineConfig(), CaptureConfig(out_dir=str(out), every_n=20), 400, autopilot_speed=8.0
        )
        assert stats.ticks == 400 and len(entries) == 20
        assert [e["frame_id"] for e in entries] == list(range(0, 400, 20))
        lines = Manifest(out).read()
        referenced = [f for e in lines for f in e["files"].values()]
        assert len(referenced) == len(set(referenced)) == 160
        on_disk = {p.name for p in out.iterdir()} - {"manifest.jsonl"}
        assert set(referenced) == on_disk
        for e in lines:
            frame = read_semantic(out / e["files"]["semantic"])
            assert frame.size == (e["width"], e["height"])
            world = json.loads((out / e["files"]["world_status"]).read_text())
            assert world["tick"] == e["frame_id"]

    def test_deterministic_tree(self, tmp_path):
        def tree(path):
            return {p.name: p.read_bytes() for p in sorted(path.iterdir())}

        for name in ("a", "b"):
            run_capture(random_world(9, FAST_CAMERA), PipelineConfig(), CaptureConfig(out_dir=str(tmp_path / name), every_n=5), 30, autopilot_speed=6.0)
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_rejects_async_and_misaligned_cadence(self, tmp_path):
        world = random_world(0, FAST_CAMERA)
        with pytest.raises(CaptureConfigError):
            run_capture(world, PipelineConfig(mode="async"), CaptureConfig(out_dir=str(tmp_path)), 10)
        with pytest.raises(CaptureConfigError):
            run_capture(world, PipelineConfig(skip=2), CaptureConfig(out_dir=str(tmp_path), every_n=20), 10)

    def test_io_error_stops_run(self, tmp_path):
        out = tmp_path / "cap"
        out.mkdir()
        (out / "00000010_boxes.xml").mkdir()
        with pytest.raises(CaptureIoError) as info:
            run_capture(random_world(3, FAST_CAMERA), PipelineConfig(), CaptureConfig(out_dir=str(out), every_n=10), 200)
        assert info.value.stats.ticks < 200
        assert [e["frame_id"] for e in Manifest(out).read()] == [0]
