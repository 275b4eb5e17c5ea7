"""Run statistics and their JSON report."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

# bucket upper edges in milliseconds; the last bucket is open-ended
LATENCY_EDGES_MS = (0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000)

REPORT_SCHEMA_VERSION = 1


class LatencyHistogram:
    def __init__(self):
        self.samples: list[float] = []

    def record(self, seconds: float):
        self.samples.append(seconds)

    def __len__(self):
        return len(self.samples)

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.samples, q)) if self.samples else 0.0

    def summary(self) -> dict:
        s = np.asarray(self.samples, dtype=np.float64)
        counts = np.histogram(s * 1e3, bins=(0.0,) + LATENCY_EDGES_MS + (math.inf,))[0] if len(s) else []
        return {
            "count": int(len(s)),
            "mean_s": float(s.mean()) if len(s) else 0.0,
            "p50_s": self.percentile(50),
            "p95_s": self.percentile(95),
            "p99_s": self.percentile(99),
            "max_s": float(s.max()) if len(s) else 0.0,
            "buckets_ms": {
                "edges": list(LATENCY_EDGES_MS),
                "counts": [int(c) for c in counts],
            },
        }


@dataclass
class PipelineStats:
    mode: str = "sync"
    skip: int = 0
    ticks: int = 0
    inferences: int = 0
    bundles_emitted: int = 0
    mixed_id_bundles: int = 0
    delivered: int = 0
    dropped_results: int = 0
    dropped_incomplete: int = 0
    rejected_parts: int = 0
    enhancer_failures: list = field(default_factory=list)
    consumer_errors: int = 0
    staleness: Counter = field(default_factory=Counter)
    staleness_exceeded: int = 0
    latency: dict = field(default_factory=dict)
    wall_time: float = 0.0
    tick_times: list = field(default_factory=list)
    inferred_frames: list = field(default_factory=list)
    disconnected: bool = False
    error: str | None = None

    def hist(self, stage: str) -> LatencyHistogram:
        h = self.latency.get(stage)
        if h is None:
            h = self.latency[stage] = LatencyHistogram()
        return h

    @property
    def fps(self) -> float:
        """Engine ticks processed per second of wall time."""
        return self.ticks / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def inference_fps(self) -> float:
        return self.inferences / self.wall_time if self.wall_time > 0 else 0.0

    def staleness_percentile(self, q: float) -> int:
        if not self.staleness:
            return 0
        values = sorted(self.staleness.elements())
        return int(np.percentile(values, q, method="higher"))

    def window_fps(self, start_tick: int) -> float:
        """Tick rate over ticks after ``start_tick`` (excludes warmup)."""
        times = self.tick_times
        if len(times) - start_tick < 2:
            return 0.0
        span = times[-1] - times[start_tick]
        return (len(times) - 1 - start_tick) / span if span > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "skip": self.skip,
            "ticks": self.ticks,
            "inferences": self.inferences,
            "bundles_emitted": self.bundles_emitted,
            "mixed_id_bundles": self.mixed_id_bundles,
            "delivered": self.delivered,
            "dropped_results": self.dropped_results,
            "dropped_incomplete": self.dropped_incomplete,
            "rejected_parts": self.rejected_parts,
            "enhancer_failures": list(self.enhancer_failures),
            "consumer_errors": self.consumer_errors,
            "staleness": {
                "histogram": {str(k): v for k, v in sorted(self.staleness.items())},
                "p99": self.staleness_percentile(99),
                "exceeded": self.staleness_exceeded,
            },
            "latency": {stage: h.summary() for stage, h in sorted(self.latency.items())},
            "wall_time_s": self.wall_time,
            "fps": self.fps,
            "inference_fps": self.inference_fps,
            "disconnected": self.disconnected,
            "error": self.error,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)
