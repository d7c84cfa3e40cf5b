"""Face-local Gaussian residuals and their resolution to world space.

A Gaussian is stored as residuals relative to its face frame: a position
offset in face units, a rotation correction, per-axis scale factors, and
appearance (opacity + RGB, no view dependence).  Resolution composes the
residuals with the frame:

    mu    = s * r @ delta_mu + t
    rot   = mat(delta_rot) @ r
    scale = delta_scale * s

so Gaussians co-move with their binding faces under animation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SplatError
from .mesh import FaceFrame

QUAT_NORM_TOL = 1e-6
MIN_DELTA_SCALE = 1e-6

DEFAULT_DELTA_SCALE = 0.5
DEFAULT_OPACITY = 0.5
DEFAULT_COLOR = 0.5


class BindingError(SplatError):
    pass


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z) to (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


@dataclass
class GaussianResidual:
    """Trainable face-local residuals plus appearance.

    ``delta_mu`` and ``delta_scale`` are dimensionless relative to the face
    scale; ``delta_rot`` is a unit quaternion (w, x, y, z).  Opacity and
    color are clamped into [0, 1] on construction; a non-unit quaternion or
    non-positive scale raises instead, because silently fixing those would
    mask real corruption.
    """

    delta_mu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    delta_scale: np.ndarray = field(
        default_factory=lambda: np.full(3, DEFAULT_DELTA_SCALE)
    )
    opacity: float = DEFAULT_OPACITY
    color: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_COLOR))

    def __post_init__(self):
        self.delta_mu = np.asarray(self.delta_mu, dtype=np.float64).reshape(3).copy()
        self.delta_rot = np.asarray(self.delta_rot, dtype=np.float64).reshape(4).copy()
        self.delta_scale = (
            np.asarray(self.delta_scale, dtype=np.float64).reshape(3).copy()
        )
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3).copy()
        if not (
            np.all(np.isfinite(self.delta_mu))
            and np.all(np.isfinite(self.delta_rot))
            and np.all(np.isfinite(self.delta_scale))
            and np.all(np.isfinite(self.color))
            and np.isfinite(self.opacity)
        ):
            raise BindingError("non-finite residual value")
        norm = float(np.linalg.norm(self.delta_rot))
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise BindingError(f"quaternion norm {norm} violates unit constraint")
        if np.any(self.delta_scale <= 0):
            raise BindingError("delta_scale components must be positive")
        self.opacity = float(min(max(self.opacity, 0.0), 1.0))
        np.clip(self.color, 0.0, 1.0, out=self.color)

    def copy(self) -> "GaussianResidual":
        return GaussianResidual(
            delta_mu=self.delta_mu,
            delta_rot=self.delta_rot,
            delta_scale=self.delta_scale,
            opacity=self.opacity,
            color=self.color,
        )


@dataclass(frozen=True)
class ResolvedGaussian:
    """World-space Gaussian for one animation frame."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray


def resolve(residual: GaussianResidual, frame: FaceFrame) -> ResolvedGaussian:
    """Compose face-local residuals with a face frame into world space."""
    mu = frame.s * (frame.r @ residual.delta_mu) + frame.t
    rot = quat_to_matrix(residual.delta_rot) @ frame.r
    scale = residual.delta_scale * frame.s
    return ResolvedGaussian(
        mu=mu,
        rot=rot,
        scale=scale,
        opacity=residual.opacity,
        color=residual.color.copy(),
    )


def covariance(resolved: ResolvedGaussian) -> np.ndarray:
    """World covariance R diag(S)^2 R^T of a resolved Gaussian."""
    d = resolved.rot * (resolved.scale**2)[None, :]
    return d @ resolved.rot.T


def resolve_batch(
    delta_mu: np.ndarray,
    delta_rot: np.ndarray,
    delta_scale: np.ndarray,
    r: np.ndarray,
    t: np.ndarray,
    s: np.ndarray,
):
    """Vectorized :func:`resolve` over N Gaussians with per-row face frames.

    Returns ``(mu, rot, scale)`` of shapes (N, 3), (N, 3, 3), (N, 3).
    """
    mu = s[:, None] * np.einsum("nij,nj->ni", r, delta_mu) + t
    rot = quat_to_matrix_batch(delta_rot) @ r
    scale = delta_scale * s[:, None]
    return mu, rot, scale


def covariance_batch(rot: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """(N, 3, 3) world covariances from batched rotations and scales."""
    return np.einsum("nij,nj,nkj->nik", rot, scale**2, rot)
