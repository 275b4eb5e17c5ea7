"""Synchronous and asynchronous pipeline loops."""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from g2r.core import ClassGrouping, EnhancerInput, ImagePlane, default_grouping
from g2r.enhance import EnhancerSpec, build_enhancer
from g2r.errors import EngineDisconnected, G2RError
from g2r.pipeline.bundle import (
    LANES,
    RGB_KEY,
    STENCIL_KEY,
    BundleAssembler,
    FrameBundle,
    Part,
    build_bundle,
    decode_part,
    lane_of,
    required_streams,
    should_infer,
)
from g2r.pipeline.queues import QueueClosed, ResultQueue
from g2r.pipeline.stats import PipelineStats
from g2r.wire.codec import Kind, Message, Sensor, WireError
from g2r.wire.transport import (
    ClientSession,
    ConnectionClosed,
    ProtocolViolation,
    WireTimeout,
    connect,
    stream_key,
)

log = logging.getLogger(__name__)

MODES = ("sync", "async")


class StalenessExceeded(G2RError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "sync"
    skip: int = 0
    subscribe: tuple = ()  # empty: whatever the enhancer needs
    enhancer: EnhancerSpec = field(default_factory=EnhancerSpec)
    max_staleness: int = 1
    staleness_hard: bool = False
    queue_capacity: int = 8
    drop_oldest: bool | None = None  # default: False in sync mode, True in async mode
    target_res: tuple | None = None
    lanes: int = 3
    reorder_window: int = 4
    ring_depth: int = 16
    timeout: float = 10.0
    max_ticks: int | None = None
    grouping: ClassGrouping = field(default_factory=default_grouping)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"pipeline mode must be one of {MODES}, got {self.mode!r}")
        if self.skip < 0:
            raise ValueError("skip must be non-negative")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be at least 1")
        if self.lanes < 1:
            raise ValueError("lanes must be at least 1")
        if self.max_staleness < 0:
            raise ValueError("max_staleness must be non-negative")
        if self.target_res is not None:
            w, h = self.target_res
            if w < 1 or h < 1:
                raise ValueError("target_res must be positive")
            object.__setattr__(self, "target_res", (int(w), int(h)))

    @property
    def streams(self) -> list[str]:
        return required_streams(self.grouping, self.subscribe)

    @property
    def drops_oldest(self) -> bool:
        return self.mode == "async" if self.drop_oldest is None else self.drop_oldest


@dataclass(frozen=True, eq=False)
class Result:
    frame_id: int
    enhanced: ImagePlane
    bundle: FrameBundle
    enhancer_input: EnhancerInput
    staleness: int = 0


Consumer = Callable[[Result], None]


def open_session(endpoint: str, config: PipelineConfig) -> ClientSession:
    return connect(endpoint, config.streams, timeout=config.timeout)


class _Runner:
    def __init__(self, config: PipelineConfig, session: ClientSession, consumer, enhancer, max_ticks):
        if session.mode != config.mode:
            raise ValueError(f"engine serves {session.mode!r} mode but the pipeline is configured for {config.mode!r}")
        self.config = config
        self.session = session
        self.consumer = consumer
        self.max_ticks = config.max_ticks if max_ticks is None else max_ticks
        self.required = frozenset(stream_key(s) for s in session.subscribe)
        missing = {stream_key(s) for s in required_streams(config.grouping)} - self.required
        if missing:
            raise ValueError(f"session is not subscribed to {sorted(map(str, missing))}")
        self.own_enhancer = enhancer is None
        self.enhancer = build_enhancer(config.enhancer) if enhancer is None else enhancer
        self.stats = PipelineStats(mode=config.mode, skip=config.skip)
        self.out = ResultQueue(config.queue_capacity, config.drops_oldest)
        self.pool = ThreadPoolExecutor(config.lanes, thread_name_prefix="g2r-lane")
        self.t0 = time.perf_counter()
        self.fatal: BaseException | None = None  # consumer error that ends the run
        self._consumer_thread = threading.Thread(target=self._consume, name="g2r-consumer", daemon=True)

    # consumer lane
    def _consume(self):
        while True:
            try:
                result = self.out.get()
            except QueueClosed:
                return
            if self.consumer is None:
                self.stats.delivered += 1
                continue
            t = time.perf_counter()
            try:
                self.consumer(result)
                self.stats.delivered += 1
            except Exception as exc:
                self.stats.consumer_errors += 1
                if getattr(exc, "fatal", False):
                    log.error("consumer failed on frame %d, stopping: %s", result.frame_id, exc)
                    self.fatal = exc
                    self.out.close()
                    return
                log.exception("consumer failed on frame %d", result.frame_id)
            self.stats.hist("consume").record(time.perf_counter() - t)

    # lanes
    def _preprocess(self, msgs: list[Message]) -> list[Part]:
        groups = {lane: [] for lane in LANES}
        for m in msgs:
            groups[lane_of(m.stream_key)].append(m)
        t = time.perf_counter()
        futures = [self.pool.submit(self._lane, ms) for ms in groups.values() if ms]
        parts = [p for f in futures for p in f.result()]  # join barrier
        self.stats.hist("preprocess").record(time.perf_counter() - t)
        return parts

    def _lane(self, msgs):
        out = []
        for m in msgs:
            try:
                out.append(decode_part(m, self.config.grouping, self.config.target_res))
            except G2RError as exc:
                log.warning("dropping %s for frame %d: %s", m.sensor, m.frame_id, exc)
                self.stats.rejected_parts += 1
        return out

    def _enhance(self, frame_id: int, bundle: FrameBundle, inp: EnhancerInput, staleness: int = 0):
        self.stats.inferences += 1
        self.stats.inferred_frames.append(frame_id)
        t = time.perf_counter()
        try:
            enhanced = self.enhancer(inp)
        except Exception as exc:
            log.warning("enhancer failed on frame %d: %s", frame_id, exc)
            self.stats.enhancer_failures.append(frame_id)
            return
        finally:
            self.stats.hist("enhance").record(time.perf_counter() - t)
        if not self.out.put(Result(frame_id, enhanced, bundle, inp, staleness), timeout=self.config.timeout) and self.fatal is None:
            log.warning("result for frame %d not delivered: consumer stalled", frame_id)

    def _finish(self):
        self.pool.shutdown(wait=True)
        self.out.close()
        self._consumer_thread.join()
        if self.own_enhancer:
            self.enhancer.close()
        self.stats.dropped_results = self.out.dropped
        self.stats.wall_time = time.perf_counter() - self.t0

    def _raise_fatal(self):
        if self.fatal is not None:
            self.fatal.stats = self.stats
            raise self.fatal

    def _disconnected(self, exc: BaseException):
        self.stats.disconnected = True
        self.stats.error = f"{type(exc).__name__}: {exc}"


class _SyncRunner(_Runner):
    def run(self) -> PipelineStats:
        cfg = self.config
        self.assembler = BundleAssembler(self.required, window=cfg.reorder_window, step=cfg.skip + 1)
        self._consumer_thread.start()
        try:
            while self.max_ticks is None or self.stats.ticks < self.max_ticks:
                if self.fatal is not None:
                    break
                t = time.perf_counter()
                try:
                    frame_id, msgs = self.session.tick()
                except ConnectionClosed as exc:
                    if not self.session.finished:
                        self._disconnected(exc)
                    break
                except (WireTimeout, WireError, ProtocolViolation) as exc:
                    self._disconnected(exc)
                    break
                self.stats.hist("transfer").record(time.perf_counter() - t)
                self.stats.ticks += 1
                self._ingest(msgs, frame_id)
                self.stats.tick_times.append(time.perf_counter() - self.t0)
            if not self.stats.disconnected:
                leftovers = self.session.finish()
                if leftovers and self.fatal is None:
                    self._ingest(leftovers, None)
            for fid, parts in self.assembler.drain():
                self._emit(fid, parts)
        finally:
            self.stats.dropped_incomplete = self.assembler.dropped_incomplete
            self.stats.rejected_parts += self.assembler.rejected
            self._finish()
        self._raise_fatal()
        if self.stats.disconnected:
            err = EngineDisconnected(self.stats.error)
            err.stats = self.stats
            raise err
        return self.stats

    def _ingest(self, msgs, clock):
        skip = self.config.skip
        wanted = [m for m in msgs if m.stream_key in self.required and should_infer(m.frame_id, skip)]
        if clock is not None and self.assembler.next_expected is None:
            self.assembler.advance(clock)  # anchor the expected-frame cursor before adding
        if wanted:
            for part in self._preprocess(wanted):
                self.assembler.add(part)
        if clock is not None:
            for fid, parts in self.assembler.advance(clock):
                self._emit(fid, parts)

    def _emit(self, frame_id, parts):
        t = time.perf_counter()
        try:
            bundle, inp = build_bundle(frame_id, parts, self.config.grouping)
        except G2RError as exc:
            log.warning("cannot assemble frame %d: %s", frame_id, exc)
            self.stats.rejected_parts += 1
            return
        self.stats.hist("join").record(time.perf_counter() - t)
        self.stats.bundles_emitted += 1
        if bundle.mixed_ids:
            self.stats.mixed_id_bundles += 1
        self._enhance(frame_id, bundle, inp)


class _AsyncRunner(_Runner):
    def run(self) -> PipelineStats:
        cfg = self.config
        self.rings = {k: deque(maxlen=cfg.ring_depth) for k in self.required}
        self.cond = threading.Condition()
        self.version = 0
        self.done = False
        self._bye_sent = False
        reader = threading.Thread(target=self._read, name="g2r-reader", daemon=True)
        self._consumer_thread.start()
        reader.start()
        failure = None
        try:
            self._control_loop()
        except StalenessExceeded as exc:
            failure = exc
            self._say_bye()
        finally:
            reader.join(timeout=self.config.timeout + 5)
            self._finish()
        self._raise_fatal()
        if failure is not None:
            failure.stats = self.stats
            raise failure
        if self.stats.disconnected:
            err = EngineDisconnected(self.stats.error)
            err.stats = self.stats
            raise err
        return self.stats

    def _say_bye(self):
        if not self._bye_sent:
            self._bye_sent = True
            try:
                self.session.conn.send(Message(Kind.Bye))
            except G2RError:
                pass

    # reader/transfer side
    def _read(self):
        batch = []
        try:
            while True:
                msg = self.session.recv(self.config.timeout)
                if msg.kind == Kind.SensorData:
                    if msg.stream_key in self.required:
                        batch.append(msg)
                elif msg.kind == Kind.TickAck:
                    if self.max_ticks is not None and self.stats.ticks >= self.max_ticks:
                        self._say_bye()
                        batch = []
                        continue
                    self._stage(batch)
                    batch = []
                elif msg.kind == Kind.Bye:
                    self._say_bye()
                    break
        except ConnectionClosed as exc:
            if not self._bye_sent:
                self._disconnected(exc)
        except (WireTimeout, WireError, ProtocolViolation) as exc:
            self._disconnected(exc)
        except Exception as exc:  # keep the control loop from waiting forever
            log.exception("async reader failed")
            self._disconnected(exc)
        finally:
            self.session.finished = True
            with self.cond:
                self.done = True
                self.cond.notify_all()

    def _stage(self, batch):
        parts = self._preprocess(batch) if batch else []
        with self.cond:
            for p in parts:
                self.rings[p.key].append(p)
            self.stats.ticks += 1
            self.stats.tick_times.append(time.perf_counter() - self.t0)
            self.version += 1
            self.cond.notify_all()

    # control side
    def _control_loop(self):
        cfg = self.config
        seen = 0
        last_bucket = -1
        while True:
            with self.cond:
                self.cond.wait_for(lambda: self.version != seen or self.done)
                if self.version == seen and self.done:
                    return
                if self.fatal is not None:
                    self._say_bye()
                    return
                seen = self.version
                if any(not ring for ring in self.rings.values()):
                    continue
                min_latest = min(ring[-1].frame_id for ring in self.rings.values())
                bucket = min_latest // (cfg.skip + 1)
                if bucket <= last_bucket:
                    continue
                last_bucket = bucket
                bound = min_latest + cfg.max_staleness
                chosen = {}
                for key, ring in self.rings.items():
                    fitting = [p for p in ring if p.frame_id <= bound]
                    chosen[key] = fitting[-1] if fitting else ring[0]
            ids = [p.frame_id for p in chosen.values()]
            staleness = max(ids) - min(ids)
            self.stats.staleness[staleness] += 1
            if staleness > cfg.max_staleness:
                self.stats.staleness_exceeded += 1
                if cfg.staleness_hard:
                    raise StalenessExceeded(f"inputs span {staleness} frames, limit {cfg.max_staleness}")
            frame_id = chosen[RGB_KEY].frame_id
            t = time.perf_counter()
            try:
                bundle, inp = build_bundle(frame_id, chosen, cfg.grouping)
            except G2RError as exc:
                log.warning("cannot assemble inputs around frame %d: %s", frame_id, exc)
                self.stats.rejected_parts += 1
                continue
            self.stats.hist("join").record(time.perf_counter() - t)
            self.stats.bundles_emitted += 1
            if bundle.mixed_ids:
                self.stats.mixed_id_bundles += 1
            self._enhance(frame_id, bundle, inp, staleness)


def run_synchronous(config: PipelineConfig, session: ClientSession, consumer: Consumer | None = None, *, enhancer=None, max_ticks=None) -> PipelineStats:
    """Tick-driven loop: every inferred frame is joined by frame id before enhancement."""
    return _SyncRunner(config, session, consumer, enhancer, max_ticks).run()


def run_asynchronous(config: PipelineConfig, session: ClientSession, consumer: Consumer | None = None, *, enhancer=None, max_ticks=None) -> PipelineStats:
    """Free-running loop: enhances the latest staged inputs and records their staleness."""
    return _AsyncRunner(config, session, consumer, enhancer, max_ticks).run()


def run_pipeline(config: PipelineConfig, session: ClientSession, consumer: Consumer | None = None, **kwargs) -> PipelineStats:
    runner = run_synchronous if config.mode == "sync" else run_asynchronous
    return runner(config, session, consumer, **kwargs)
