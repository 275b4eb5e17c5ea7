from g2r.eval.bench import (
    BENCH_SCHEMA_VERSION,
    DEFAULT_COSTS,
    BenchReport,
    Cell,
    CellFailed,
    CellResult,
    Workload,
    expected_inferences,
    fps_benchmark,
    parse_matrix,
    run_cell,
    warmup_ticks,
)
from g2r.eval.metrics import (
    MEAN_CONVENTION,
    DatasetIou,
    FeatureSet,
    IouReport,
    ZeroVector,
    cosine_matrix,
    cosine_pairwise,
    iou,
    iou_dirs,
)
