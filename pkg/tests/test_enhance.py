import sys
import time
import warnings

import numpy as np
import pytest

from g2r.core import EnhancerInput, ImagePlane, OneHotStack, Precision
from g2r.enhance import (
    CalibrationTable,
    DatasetStats,
    DegenerateChannel,
    EmptyCalibrationSet,
    EnhancerSpec,
    ExternalProtocolError,
    ExternalTimeout,
    InvalidSpec,
    build_enhancer,
    calibrate_int8,
    dequantize,
    dequantize_array,
    enhance,
    quantize,
    quantize_array,
    request_messages,
    stats_match,
)
from g2r.errors import DimensionMismatch
from g2r.wire import Sensor


def make_input(rng, w=16, h=12, frame_id=7, with_streams=True):
    rgb = ImagePlane(rng.random((h, w, 3), dtype=np.float32))
    groups = rng.integers(0, 12, size=(h, w))
    onehot = OneHotStack((groups[None] == np.arange(12)[:, None, None]).astype(np.uint8))
    streams = {}
    if with_streams:
        for g in range(12):
            c = 1 if g == 0 else 14
            streams[g] = (rng.random((c, h, w)) * onehot.planes[g]).astype(np.float32)
    return EnhancerInput(frame_id, rgb, onehot, streams)


def moments_oracle(img, target):
    """Reference transform in float64, written pixel-loop free but independent of stats_match."""
    x = img.data.astype(np.float64)
    out = np.empty_like(x)
    for c in range(3):
        ch = x[..., c]
        mu = ch.sum() / ch.size
        sd = np.sqrt(((ch - mu) ** 2).sum() / ch.size)
        out[..., c] = (ch - mu) / sd * target.std[c] + target.mean[c]
    return np.clip(out, 0, 1)


# -- spec validation ---------------------------------------------------------------


def test_spec_requires_stats_for_stats_match():
    with pytest.raises(InvalidSpec):
        EnhancerSpec(kind="stats_match")


def test_spec_requires_calibration_for_int8():
    with pytest.raises(InvalidSpec):
        EnhancerSpec(precision="int8")


def test_spec_rejects_unknown_kind():
    with pytest.raises(InvalidSpec):
        EnhancerSpec(kind="neural")


def test_dataset_stats_reject_zero_std():
    with pytest.raises(InvalidSpec):
        DatasetStats((0.5, 0.5, 0.5), (0.1, 0.0, 0.1))


# -- built-in enhancers ------------------------------------------------------------


def test_identity_is_bit_exact():
    inp = make_input(np.random.default_rng(0))
    out = enhance(inp, EnhancerSpec())
    assert out == inp.rgb


def test_stats_match_against_own_stats_is_fixed_point():
    inp = make_input(np.random.default_rng(1))
    own = DatasetStats.from_images([inp.rgb])
    out = enhance(inp, EnhancerSpec(kind="stats_match", target_stats=own))
    assert np.abs(out.data - inp.rgb.data).max() <= 1e-6


def test_stats_match_matches_oracle():
    rng = np.random.default_rng(2)
    img = ImagePlane(rng.random((20, 30, 3), dtype=np.float32))
    target = DatasetStats((0.3, 0.5, 0.6), (0.05, 0.1, 0.08))
    out = stats_match(img, target)
    np.testing.assert_allclose(out.data, moments_oracle(img, target), atol=1e-6)


def test_stats_match_hits_target_moments():
    rng = np.random.default_rng(3)
    img = ImagePlane(rng.normal(0.5, 0.15, size=(64, 64, 3)).clip(0, 1).astype(np.float32))
    target = DatasetStats((0.4, 0.4, 0.4), (0.1, 0.1, 0.1))
    out = stats_match(img, target).data.astype(np.float64).reshape(-1, 3)
    # moments straight from the transformed pixels; 0.4 +- 4 sigma stays inside [0, 1]
    assert np.abs(out.mean(axis=0) - 0.4).max() <= 1e-3
    assert np.abs(out.std(axis=0) - 0.1).max() <= 1e-3


def test_stats_match_twice_changes_nothing():
    rng = np.random.default_rng(4)
    img = ImagePlane(rng.random((32, 32, 3), dtype=np.float32))
    target = DatasetStats((0.45, 0.5, 0.55), (0.12, 0.1, 0.11))
    once = stats_match(img, target)
    twice = stats_match(once, target)
    assert np.abs(twice.data - once.data).max() <= 1e-6


def test_constant_image_lands_on_target_mean():
    img = ImagePlane(np.full((8, 8, 3), 0.3, np.float32))
    target = DatasetStats((0.2, 0.6, 0.9), (0.1, 0.1, 0.1))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = stats_match(img, target)
    assert any(issubclass(w.category, DegenerateChannel) for w in caught)
    np.testing.assert_allclose(out.data.reshape(-1, 3), np.tile([0.2, 0.6, 0.9], (64, 1)), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_f16_emulation_stays_close_to_f32(seed):
    rng = np.random.default_rng(seed)
    inp = make_input(rng, 40, 30, with_streams=False)
    target = DatasetStats(tuple(rng.uniform(0.3, 0.7, 3)), tuple(rng.uniform(0.08, 0.25, 3)))
    f32 = build_enhancer(EnhancerSpec(kind="stats_match", target_stats=target))(inp)
    f16 = build_enhancer(EnhancerSpec(kind="stats_match", precision="f16emu", target_stats=target))(inp)
    assert f16.precision == Precision.F16
    assert np.abs(f16.data - f32.data).max() <= 2.0**-10


def test_outputs_stay_in_unit_range():
    rng = np.random.default_rng(5)
    inp = make_input(rng, with_streams=False)
    target = DatasetStats((0.9, 0.1, 0.5), (0.5, 0.5, 0.5))
    for precision in ("f32", "f16emu"):
        out = enhance(inp, EnhancerSpec(kind="stats_match", precision=precision, target_stats=target))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


# -- INT8 calibration ----------------------------------------------------------------


def test_calibration_unit_max():
    img = np.random.default_rng(6).random((8, 8, 3), dtype=np.float32)
    img[0, 0] = 1.0
    table = calibrate_int8([ImagePlane(img)])
    assert table.scale == pytest.approx((1 / 127,) * 3, rel=1e-12)


def test_calibration_half_max():
    img = np.zeros((4, 4, 3), np.float32)
    img[1, 2, 0] = 0.5
    img[..., 1] = 0.25
    img[3, 3, 2] = 1.0
    table = calibrate_int8([ImagePlane(img)])
    assert table.scale[0] == pytest.approx(0.5 / 127, rel=1e-12)
    assert table.scale[1] == pytest.approx(0.25 / 127, rel=1e-12)


def test_calibration_needs_samples():
    with pytest.raises(EmptyCalibrationSet):
        calibrate_int8([])


def test_quantize_zero_and_grid_point():
    table = CalibrationTable((0.01, 0.02, 0.03))
    x = np.zeros((1, 2, 3), np.float32)
    x[0, 1] = np.array(table.scale) * 127
    q = quantize(ImagePlane(x), table)
    assert q.q[0, 0].tolist() == [0, 0, 0]
    assert q.q[0, 1].tolist() == [127, 127, 127]
    back = dequantize(q)
    assert back.data[0, 0].tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_array_equal(back.data[0, 1], x[0, 1])


def test_quantization_error_bound_monte_carlo():
    rng = np.random.default_rng(7)
    scale = 0.8 / 127
    x = rng.uniform(-0.8, 0.8, size=1_000_000)
    err = np.abs(dequantize_array(quantize_array(x, scale), scale) - x)
    assert err.max() <= scale / 2


def test_quantization_error_bound_on_calibration_set():
    rng = np.random.default_rng(8)
    samples = [ImagePlane(rng.random((16, 16, 3), dtype=np.float32) * m) for m in (0.3, 0.9, 0.6)]
    table = calibrate_int8(samples)
    for s in samples:
        q = quantize(s, table)
        err = np.abs(dequantize_array(q.q, table.scale) - s.data.astype(np.float64))
        assert (err <= np.array(table.scale) / 2).all()


def test_int8_enhancer_within_half_step():
    rng = np.random.default_rng(9)
    inp = make_input(rng, with_streams=False)
    table = calibrate_int8([inp.rgb])
    out = enhance(inp, EnhancerSpec(precision="int8", calibration=table))
    # float32 storage adds at most one ulp at 1.0 on top of the scale/2 bound
    slack = np.array(table.scale) / 2 + 2.0**-23
    assert (np.abs(out.data - inp.rgb.data) <= slack).all()


def test_simulated_cost_sets_minimum_latency():
    inp = make_input(np.random.default_rng(10), with_streams=False)
    enh = build_enhancer(EnhancerSpec(simulated_cost=0.05))
    t0 = time.perf_counter()
    enh(inp)
    assert time.perf_counter() - t0 >= 0.05


# -- external bridge -----------------------------------------------------------------


def double(mode, **extra):
    cmd = f"cmd:{sys.executable} -m g2r.enhance.echo --mode {mode}"
    if "delay" in extra:
        cmd += f" --delay {extra.pop('delay')}"
    return EnhancerSpec(kind="external", external_endpoint=cmd, **extra)


def test_request_layout():
    inp = make_input(np.random.default_rng(11))
    msgs = request_messages(inp)
    assert len(msgs) == 14
    assert {m.frame_id for m in msgs} == {7}
    assert [m.sensor for m in msgs[:12]] == [Sensor.GBuffer] * 12
    assert [int(m.gbuffer_id) for m in msgs[:12]] == list(range(12))
    assert msgs[12].sensor == Sensor.Stencil and msgs[12].channels == 12
    assert msgs[13].sensor == Sensor.Rgb


def test_external_echo_is_identity():
    rng = np.random.default_rng(12)
    with build_enhancer(double("echo")) as enh:
        for fid in range(3):
            inp = make_input(rng, frame_id=fid)
            out = enh(inp)
            np.testing.assert_array_equal(out.data, inp.rgb.data)


def test_external_wrong_size_is_dimension_mismatch_and_recoverable():
    rng = np.random.default_rng(13)
    with build_enhancer(double("wrong-size")) as enh:
        with pytest.raises(DimensionMismatch):
            enh(make_input(rng, frame_id=1))
        with pytest.raises(DimensionMismatch):
            enh(make_input(rng, frame_id=2))


def test_external_garbage_is_protocol_error():
    with build_enhancer(double("garbage")) as enh:
        with pytest.raises(ExternalProtocolError):
            enh(make_input(np.random.default_rng(14)))


def test_external_timeout_fires_at_deadline():
    deadline = 0.5
    rng = np.random.default_rng(15)
    with build_enhancer(double("slow", delay=2 * deadline, deadline=deadline)) as enh:
        enh._open()  # process start-up is outside the per-frame deadline
        t0 = time.monotonic()
        with pytest.raises(ExternalTimeout):
            enh(make_input(rng))
        elapsed = time.monotonic() - t0
    assert deadline * 0.9 <= elapsed <= deadline * 1.1


def test_external_bridge_restarts_after_timeout():
    from dataclasses import replace

    rng = np.random.default_rng(16)
    with build_enhancer(double("slow", delay=0.3, deadline=0.2)) as enh:
        with pytest.raises(ExternalTimeout):
            enh(make_input(rng, frame_id=1))
        assert enh._conn is None
        enh.spec = replace(enh.spec, deadline=2.0)
        inp = make_input(rng, frame_id=2)
        np.testing.assert_array_equal(enh(inp).data, inp.rgb.data)


def test_external_unreachable_tcp():
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    spec = EnhancerSpec(kind="external", external_endpoint=f"tcp://127.0.0.1:{port}")
    with pytest.raises(ExternalProtocolError):
        enhance(make_input(np.random.default_rng(17)), spec)
