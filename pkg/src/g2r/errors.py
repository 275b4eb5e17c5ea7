"""Exception hierarchy shared across the package."""


class G2RError(Exception):
    """Base class for every error raised by g2r."""


class DimensionMismatch(G2RError):
    pass


class ZeroDimension(G2RError):
    pass


class OutOfRangeClassId(G2RError):
    def __init__(self, pixel, class_id):
        super().__init__(f"class id {class_id} at pixel {pixel} is out of range [0, 28]")
        self.pixel = pixel
        self.class_id = class_id


class MissingBuffer(G2RError):
    def __init__(self, buffer_id):
        super().__init__(f"G-buffer {buffer_id} is required but missing")
        self.buffer_id = buffer_id


class PolicyError(G2RError):
    """Invalid class grouping or buffer policy."""


class StencilRoundingError(G2RError):
    pass


class EnhancerFailure(G2RError):
    def __init__(self, frame_id, cause=None):
        super().__init__(f"enhancer failed on frame {frame_id}: {cause}")
        self.frame_id = frame_id
        self.cause = cause


class EngineDisconnected(G2RError):
    pass
