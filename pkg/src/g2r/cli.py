"""Command-line entry point: ``g2r <subcommand> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from g2r.errors import EnhancerFailure, EngineDisconnected, G2RError

log = logging.getLogger("g2r")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ENGINE = 4
EXIT_ENHANCER = 5
EXIT_SCENARIO = 6

_endpoints = itertools.count()


class ScenarioFailure(G2RError):
    """Wraps scenario-file errors so they map to their own exit code."""

    def __init__(self, cause):
        super().__init__(f"scenario: {cause}")
        self.cause = cause


def exit_code(exc: BaseException) -> int:
    from g2r.datagen import CaptureConfigError, CaptureIoError, ContainerError, MissingProduct
    from g2r.enhance import EmptyCalibrationSet, InvalidSpec
    from g2r.enhance.external import ExternalProtocolError, ExternalTimeout
    from g2r.pipeline import StalenessExceeded
    from g2r.scenario import UnknownActor
    from g2r.schema import ValidationError
    from g2r.wire import ConnectionClosed, ConnectionRefused, ProtocolViolation, WireError, WireTimeout

    if isinstance(exc, (ScenarioFailure, UnknownActor)):
        return EXIT_SCENARIO
    if isinstance(exc, (ValidationError, CaptureConfigError, argparse.ArgumentError)):
        return EXIT_CONFIG
    if isinstance(exc, (CaptureIoError, MissingProduct, ContainerError, OSError)):
        return EXIT_IO
    if isinstance(exc, (EngineDisconnected, StalenessExceeded, WireError, ConnectionRefused, ConnectionClosed, ProtocolViolation, WireTimeout)):
        return EXIT_ENGINE
    if isinstance(exc, (InvalidSpec, EmptyCalibrationSet, ExternalTimeout, ExternalProtocolError, EnhancerFailure)):
        return EXIT_ENHANCER
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_OTHER


def error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc)}
    errors = getattr(exc, "errors", None)
    if errors and all(hasattr(e, "to_dict") for e in errors):
        payload["details"] = [e.to_dict() for e in errors]
    stats = getattr(exc, "stats", None)
    if stats is not None:
        payload["stats"] = stats.to_dict()
    return payload


# -- engine plumbing ------------------------------------------------------------------


def _load_scenario(cfg, path):
    from g2r.scenario import load_scenario

    path = path or cfg.data["scenario_path"]
    if not path:
        return None
    path = Path(path) if Path(path).is_absolute() or Path(path).exists() else cfg.resolve(path)
    try:
        return load_scenario(path)
    except (G2RError, OSError) as exc:
        raise ScenarioFailure(exc) from exc


@contextlib.contextmanager
def engine_session(cfg, pcfg, ticks=None, scenario=None):
    """Yield ``(session, service)``; serves the mock engine in-process unless an endpoint is configured."""
    from g2r.mockengine import EngineService
    from g2r.pipeline import open_session
    from g2r.wire import Jitter, serve

    eng = cfg.data["engine"]
    if eng["endpoint"] != "mock":
        with contextlib.closing(open_session(eng["endpoint"], pcfg)) as session:
            yield session, None
        return
    controller = None
    speed = eng["autopilot_speed"]
    if scenario is not None:
        from g2r.scenario import ScenarioRunner, build_world

        world = replace(build_world(scenario, cfg.camera()), fixed_dt=eng["fixed_dt"])
        controller = ScenarioRunner(scenario)
        speed = scenario.ego_speed
    else:
        world = cfg.world()
    service = EngineService(world, controller=controller, autopilot_speed=speed)
    endpoint = f"inproc://cli-{next(_endpoints)}"
    kw = {"info": service.info, "on_control": service.on_control}
    if eng["mode"] == "async":
        kw["period"] = eng["period"]
    elif eng["jitter"]:
        kw["jitter"] = Jitter(eng["jitter"], seed=eng["seed"])
    with serve(service, endpoint, eng["mode"], **kw):
        session = open_session(endpoint, pcfg)
        try:
            yield session, service
        finally:
            session.conn.close()


def _ticks(args, cfg, scenario):
    if args.ticks is not None:
        return args.ticks
    if scenario is not None:
        return scenario.duration
    raise G2RError("--ticks is required (or a scenario with a duration)")


def _emit(obj, args, out=None):
    text = json.dumps(obj, sort_keys=True, indent=None if args.json else 2)
    print(text, file=out or sys.stdout)


# -- subcommands ----------------------------------------------------------------------


def cmd_run(args, cfg):
    from g2r.pipeline import run_pipeline

    scenario = _load_scenario(cfg, args.scenario)
    ticks = _ticks(args, cfg, scenario)
    pcfg = cfg.pipeline_config()
    with engine_session(cfg, pcfg, ticks, scenario) as (session, _):
        stats = run_pipeline(pcfg, session, max_ticks=ticks)
    report = stats.to_dict()
    if args.stats:
        Path(args.stats).write_text(stats.to_json(indent=2) + "\n")
    _emit(report, args)
    return EXIT_OK


def cmd_capture(args, cfg):
    from g2r.datagen import CaptureConfigError, Capturer, check_cadence
    from g2r.pipeline import run_pipeline
    from g2r.schema import RangeViolation

    if cfg.data["pipeline"]["mode"] != "sync":
        raise RangeViolation("pipeline.mode", "dataset capture runs in synchronous mode only")
    scenario = _load_scenario(cfg, args.scenario)
    ticks = _ticks(args, cfg, scenario)
    ccfg = cfg.capture_config(args.out)
    pcfg = cfg.pipeline_config()
    check_cadence(ccfg.every_n, pcfg.skip)
    if pcfg.target_res is not None and list(pcfg.target_res) != cfg.data["engine"]["resolution"]:
        raise CaptureConfigError("capture keeps labels aligned with the frame, so target_res must match engine.resolution")
    pcfg = replace(pcfg, subscribe=tuple(dict.fromkeys(tuple(pcfg.subscribe) + ccfg.stream_extras)))
    capturer = Capturer(ccfg)
    with engine_session(cfg, pcfg, ticks, scenario) as (session, _):
        stats = run_pipeline(pcfg, session, capturer, max_ticks=ticks)
    _emit({"captures": len(capturer.entries), "out_dir": ccfg.out_dir, "ticks": stats.ticks, "delivered": stats.delivered}, args)
    return EXIT_OK


def cmd_scenario(args, cfg):
    from g2r.scenario import play

    scenario = _load_scenario(cfg, args.scenario)
    if scenario is None:
        raise ScenarioFailure("no scenario given (--scenario or scenario_path)")
    runner, trajectory = play(scenario, cfg.camera(), args.ticks)
    final = trajectory[-1]
    _emit(
        {
            "name": scenario.name,
            "ticks": final.tick,
            "fire_ticks": {str(k): v for k, v in sorted(runner.fire_ticks.items())},
            "final_positions": {str(a.id): [round(c, 6) for c in a.position] for a in final.actors},
        },
        args,
    )
    return EXIT_OK


def cmd_bench(args, cfg):
    from g2r.eval import fps_benchmark

    matrix = args.matrix or cfg.data["eval"]["matrix"]
    report = fps_benchmark(matrix, cfg.workload(args.ticks))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(report.to_json(indent=2) + "\n")
        (out / "bench.csv").write_text(report.to_csv())
    _emit(report.to_dict(), args)
    failed = [c for c in report.cells if c.status != "ok"]
    return EXIT_OTHER if failed else EXIT_OK


def cmd_eval_iou(args, cfg):
    from g2r.eval import iou_dirs

    report = iou_dirs(args.pred_dir, args.gt_dir, pattern=args.pattern)
    body = report.to_dict()
    if not args.per_frame:
        body.pop("per_frame")
    _emit(body, args)
    return EXIT_OK


def cmd_eval_cosine(args, cfg):
    from g2r.eval import FeatureSet, cosine_pairwise

    a, b = FeatureSet.load(args.a), FeatureSet.load(args.b)
    _emit({"a": a.label, "b": b.label, "n_a": len(a.vectors), "n_b": len(b.vectors), "mean_cosine": cosine_pairwise(a, b)}, args)
    return EXIT_OK


def cmd_protocol_dump(args, cfg):
    from g2r.wire import Kind, encode_message, stream_name

    pcfg = cfg.pipeline_config()
    with engine_session(cfg, pcfg, args.ticks) as (session, _):
        count = 0
        if session.mode == "sync":
            batches = (session.tick() for _ in range(args.ticks))
            messages = (m for fid, msgs in batches for m in msgs)
        else:
            def stream():
                acks = 0
                while acks < args.ticks:
                    m = session.recv()
                    if m.kind == Kind.TickAck:
                        acks += 1
                    if m.kind == Kind.Bye:
                        return
                    yield m
            messages = stream()
        for msg in messages:
            data = encode_message(msg)
            line = {
                "kind": msg.kind.name,
                "frame_id": msg.frame_id,
                "sensor": msg.sensor.name if msg.sensor is not None else None,
                "stream": stream_name(msg.stream_key) if msg.kind == Kind.SensorData else None,
                "precision": msg.precision.name,
                "size": [msg.width, msg.height, msg.channels],
                "bytes": len(data),
            }
            if args.hex:
                line["header_hex"] = data[:32].hex()
            print(json.dumps(line, sort_keys=True))
            count += 1
    log.info("dumped %d messages", count)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "capture": cmd_capture,
    "scenario": cmd_scenario,
    "bench": cmd_bench,
    "eval-iou": cmd_eval_iou,
    "eval-cosine": cmd_eval_cosine,
    "protocol-dump": cmd_protocol_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="master YAML config (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a config value; repeatable")
    common.add_argument("--json", action="store_true", help="compact JSON output and JSON errors on stderr")
    common.add_argument("--verbose", "-v", action="count", default=0)

    parser = argparse.ArgumentParser(prog="g2r", description="G-buffer to enhancer streaming pipeline tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run the live pipeline and print its stats")
    p.add_argument("--ticks", type=int)
    p.add_argument("--scenario", help="drive the mock engine with a scenario file")
    p.add_argument("--stats", help="also write the stats report to this file")

    p = sub.add_parser("capture", parents=[common], help="run the pipeline and write a dataset")
    p.add_argument("--ticks", type=int)
    p.add_argument("--scenario")
    p.add_argument("--out", help="output directory (overrides capture.out_dir)")

    p = sub.add_parser("scenario", parents=[common], help="play a scenario without rendering")
    p.add_argument("--scenario")
    p.add_argument("--ticks", type=int, help="defaults to the scenario duration")

    p = sub.add_parser("bench", parents=[common], help="FPS benchmark over a precision:skip matrix")
    p.add_argument("--matrix", help="e.g. f32:0,f32:3,f16emu:0")
    p.add_argument("--ticks", type=int)
    p.add_argument("--out", help="directory for bench.json and bench.csv")

    p = sub.add_parser("eval-iou", parents=[common], help="IoU between two directories of label images")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--pattern", default="*.png")
    p.add_argument("--per-frame", action="store_true")

    p = sub.add_parser("eval-cosine", parents=[common], help="mean pairwise cosine similarity of two feature files")
    p.add_argument("a")
    p.add_argument("b")

    p = sub.add_parser("protocol-dump", parents=[common], help="decoded trace of a wire session")
    p.add_argument("--ticks", type=int, default=1)
    p.add_argument("--hex", action="store_true", help="include the raw header bytes")
    return parser


def main(argv=None) -> int:
    from g2r.config import load_config

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        return EXIT_OTHER
    except Exception as exc:  # every failure becomes a documented exit code
        code = exit_code(exc)
        if args.json:
            print(json.dumps(error_payload(exc), sort_keys=True), file=sys.stderr)
        else:
            print(f"g2r {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if code == EXIT_OTHER:
            log.debug("unexpected failure", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
