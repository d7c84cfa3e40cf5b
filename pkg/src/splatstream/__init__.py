"""Progressive mesh-anchored Gaussian splatting.

A template triangle mesh grows a per-face subdivision forest with one
Gaussian bound to every face node in face-local coordinates.  The forest
is fitted to reference views with multi-level supervision and adaptive,
gradient-driven growth, scored by rendering contribution, linearized into
a level-major importance-ranked stream, and encoded into a prefix-
decodable binary asset that renders at any truncation point.
"""

from .binding import GaussianResidual, ResolvedGaussian, covariance, resolve
from .codec import DecodedState, decode_prefix, encode, encode_bytes
from .errors import SplatError
from .fitter import FitConfig, SupervisionSet, TrainingLog, fit, loss
from .forest import Forest, child_vertex, project_simplex
from .growth import GrowthConfig, accumulate, advance_cap, growth_step
from .importance import StreamOrder, build_order, face_scores
from .mesh import (
    Camera,
    FaceFrame,
    FrameVertices,
    TemplateMesh,
    face_frame,
    load_cameras,
    load_frames,
    load_mesh,
    read_ppm,
    write_ppm,
)
from .renderer import RenderOutput, Splat2D, SplatBatch, project, render
from .session import BandwidthProfile, RegionMask, SessionMetrics, render_prefix, run_session

__version__ = "0.1.0"

__all__ = [
    "BandwidthProfile",
    "Camera",
    "DecodedState",
    "FaceFrame",
    "FitConfig",
    "Forest",
    "FrameVertices",
    "GaussianResidual",
    "GrowthConfig",
    "RegionMask",
    "RenderOutput",
    "ResolvedGaussian",
    "SessionMetrics",
    "Splat2D",
    "SplatBatch",
    "SplatError",
    "StreamOrder",
    "SupervisionSet",
    "TemplateMesh",
    "TrainingLog",
    "accumulate",
    "advance_cap",
    "build_order",
    "child_vertex",
    "covariance",
    "decode_prefix",
    "encode",
    "encode_bytes",
    "face_frame",
    "face_scores",
    "fit",
    "growth_step",
    "load_cameras",
    "load_frames",
    "load_mesh",
    "loss",
    "project",
    "project_simplex",
    "read_ppm",
    "render",
    "render_prefix",
    "resolve",
    "run_session",
    "write_ppm",
]
