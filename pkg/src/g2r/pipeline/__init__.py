"""Frame-id join, preprocessing lanes and the synchronous/asynchronous loops."""

from g2r.pipeline.bundle import (
    BundleAssembler,
    FrameBundle,
    Part,
    assemble_input,
    build_bundle,
    decode_part,
    preprocess_bundle,
    required_streams,
    should_infer,
)
from g2r.pipeline.queues import QueueClosed, ResultQueue
from g2r.pipeline.runner import (
    PipelineConfig,
    Result,
    StalenessExceeded,
    open_session,
    run_asynchronous,
    run_pipeline,
    run_synchronous,
)
from g2r.pipeline.stats import LatencyHistogram, PipelineStats
