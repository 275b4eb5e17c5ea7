"""Pluggable enhancement stage."""

from g2r.enhance.base import (
    CalibrationTable,
    DatasetStats,
    DegenerateChannel,
    EmptyCalibrationSet,
    Enhancer,
    EnhancerKind,
    EnhancerPrecision,
    EnhancerSpec,
    IdentityEnhancer,
    Int8Plane,
    InvalidSpec,
    StatsMatchEnhancer,
    build_enhancer,
    calibrate_int8,
    dequantize,
    dequantize_array,
    enhance,
    quantize,
    quantize_array,
    round_f16,
    spec_from_dict,
    stats_match,
)
from g2r.enhance.external import (
    ExternalEnhancer,
    ExternalProtocolError,
    ExternalTimeout,
    request_messages,
)
