from g2r.datagen.boxes import (
    DETECTION_CLASSES,
    DETECTION_NAMES,
    FrameIdMismatch,
    VocRecord,
    generate_boxes,
    read_voc_xml,
    write_voc_xml,
)
from g2r.datagen.capture import CaptureConfigError, Capturer, check_cadence, run_capture
from g2r.datagen.container import ContainerError, decode_container, encode_container, read_matrix, write_matrix
from g2r.datagen.writer import (
    MANIFEST,
    PRODUCTS,
    CaptureConfig,
    CaptureIoError,
    Manifest,
    MissingProduct,
    capture_count,
    encode_depth,
    read_depth,
    read_image,
    read_semantic,
    should_capture,
    stem,
    write_capture,
    write_status_json,
)
