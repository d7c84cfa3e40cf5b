"""Deterministic CPU splatting renderer with contribution statistics and
analytic photometric gradients.

Resolved 3D Gaussians are projected to 2D splats (perspective mean,
first-order Jacobian covariance, 0.3 px dilation) and composited
front-to-back under a global depth sort with node-id tie-breaking.  The
compositing rules are fixed and shared by the forward pass, the gradient
pass, and any reference evaluator:

* per-pixel alpha ``a = opacity * exp(-0.5 d^T C^-1 d)`` clamped to
  [0, 0.999], skipped below 1/255;
* transmittance walk stops once ``T < 1e-4``;
* the background is composited with the final transmittance.

When a reference image is supplied, the render also produces the mean-L1
loss and its exact gradients with respect to each splat's color, opacity,
and 2D mean (sign(0) = 0 convention).  Per-splat rasterization is limited
to a bounding box of 3.5 sigma, which is strictly wider than the 1/255
alpha floor for any legal opacity, so the box never changes the result.

Hot loops are compiled with numba; everything accumulates in float64 and
is bit-reproducible run to run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .binding import ResolvedGaussian, covariance
from .errors import SplatError
from .mesh import Camera

NEAR_PLANE = 0.01
DILATION = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
CULL_SIGMA = 3.0
BBOX_SIGMA = 3.5  # exp(-3.5^2/2) * 0.999 < 1/255, so the box is lossless


class RenderError(SplatError):
    pass


class SingularCovariance(RenderError):
    pass


@dataclass
class Splat2D:
    """A projected Gaussian: 2D mean/covariance in pixels plus appearance.

    ``jac`` is the 2x3 Jacobian of the pixel mean with respect to the world
    mean, kept so position gradients can be chained back through projection.
    """

    node_id: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    jac: np.ndarray | None = None


@dataclass
class SplatBatch:
    """Struct-of-arrays form of a splat list (the renderer's native input)."""

    node_ids: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    jacs: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_splats(cls, splats) -> "SplatBatch":
        n = len(splats)
        batch = cls(
            node_ids=np.array([s.node_id for s in splats], dtype=np.int64),
            means=np.array([s.mean2d for s in splats], dtype=np.float64).reshape(n, 2),
            covs=np.array([s.cov2d for s in splats], dtype=np.float64).reshape(n, 2, 2),
            depths=np.array([s.depth for s in splats], dtype=np.float64),
            opacities=np.array([s.opacity for s in splats], dtype=np.float64),
            colors=np.array([s.color for s in splats], dtype=np.float64).reshape(n, 3),
        )
        if n and all(s.jac is not None for s in splats):
            batch.jacs = np.array([s.jac for s in splats], dtype=np.float64)
        return batch

    def subset(self, mask: np.ndarray) -> "SplatBatch":
        return SplatBatch(
            node_ids=self.node_ids[mask],
            means=self.means[mask],
            covs=self.covs[mask],
            depths=self.depths[mask],
            opacities=self.opacities[mask],
            colors=self.colors[mask],
            jacs=None if self.jacs is None else self.jacs[mask],
        )


@dataclass
class RenderOutput:
    """Image, per-pixel accumulated opacity, and per-splat statistics.

    Array fields are aligned with the depth-sorted splat order recorded in
    ``node_ids``; ``order`` maps sorted rows back to the input batch.
    Gradient fields are populated only when a reference image was given.
    """

    image: np.ndarray
    alpha: np.ndarray
    node_ids: np.ndarray
    order: np.ndarray
    contrib: np.ndarray
    loss: float | None = None
    grad_color: np.ndarray | None = None
    grad_opacity: np.ndarray | None = None
    grad_mean2d: np.ndarray | None = None
    _contrib_map: dict = field(default=None, repr=False)
    _grad2d_map: dict = field(default=None, repr=False)

    def per_gaussian_contrib(self) -> dict:
        """node_id -> summed alpha * T over all pixels (all rendered splats)."""
        if self._contrib_map is None:
            self._contrib_map = {
                int(nid): float(c) for nid, c in zip(self.node_ids, self.contrib)
            }
        return self._contrib_map

    def per_gaussian_grad2d(self) -> dict:
        """node_id -> norm of the loss gradient w.r.t. the splat's 2D mean."""
        if self.grad_mean2d is None:
            raise RenderError("gradients require a reference image")
        if self._grad2d_map is None:
            norms = np.linalg.norm(self.grad_mean2d, axis=1)
            self._grad2d_map = {
                int(nid): float(g) for nid, g in zip(self.node_ids, norms)
            }
        return self._grad2d_map


def photometric_gradients(output: RenderOutput):
    """Per-splat gradients of the mean-L1 loss, aligned with the output's
    depth-sorted order: (color (N, 3), opacity (N,), mean2d (N, 2))."""
    if output.grad_color is None:
        raise RenderError("gradients require a reference image")
    return output.grad_color, output.grad_opacity, output.grad_mean2d


def write_render_stats_csv(output: RenderOutput, path) -> None:
    """Dump per-splat statistics: node_id, contribution, grad2d norm (blank
    when the render had no reference image)."""
    import csv as _csv

    grads = (
        np.linalg.norm(output.grad_mean2d, axis=1)
        if output.grad_mean2d is not None
        else None
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["node_id", "contrib", "grad2d"])
        for row, nid in enumerate(output.node_ids):
            writer.writerow(
                [
                    int(nid),
                    f"{output.contrib[row]:.12g}",
                    f"{grads[row]:.12g}" if grads is not None else "",
                ]
            )


# ----------------------------------------------------------------------
# projection


def project(resolved: ResolvedGaussian, cam: Camera, node_id: int = 0) -> Splat2D | None:
    """Project one world Gaussian; None when behind the near plane or when
    the 3-sigma bound misses the viewport."""
    rot_wc = cam.rotation
    p_cam = rot_wc @ resolved.mu + cam.translation
    z = float(p_cam[2])
    if z <= NEAR_PLANE:
        return None
    x, y = float(p_cam[0]), float(p_cam[1])
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    jac_pinhole = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )
    jac = jac_pinhole @ rot_wc
    cov2d = jac @ covariance(resolved) @ jac.T + DILATION * np.eye(2)
    radius = CULL_SIGMA * math.sqrt(max(_max_eigenvalue_2x2(cov2d), 0.0))
    if (
        mean2d[0] + radius < 0
        or mean2d[0] - radius > cam.width - 1
        or mean2d[1] + radius < 0
        or mean2d[1] - radius > cam.height - 1
    ):
        return None
    return Splat2D(
        node_id=node_id,
        mean2d=mean2d,
        cov2d=cov2d,
        depth=z,
        opacity=resolved.opacity,
        color=resolved.color.copy(),
        jac=jac,
    )


def _max_eigenvalue_2x2(cov: np.ndarray) -> float:
    a, b, c = float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1])
    mid = 0.5 * (a + c)
    disc = math.sqrt(max(mid * mid - (a * c - b * b), 0.0))
    return mid + disc


def project_batch(
    node_ids: np.ndarray,
    mu: np.ndarray,
    cov3d: np.ndarray,
    opacity: np.ndarray,
    color: np.ndarray,
    cam: Camera,
) -> SplatBatch:
    """Vectorized projection of N world Gaussians; culled rows are dropped."""
    rot_wc = cam.rotation
    p_cam = mu @ rot_wc.T + cam.translation
    z = p_cam[:, 2]
    visible = z > NEAR_PLANE
    # Jacobians are only evaluated at safe depths; culled rows get a dummy 1.
    zs = np.where(visible, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]
    means = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    n = len(mu)
    jac_pin = np.zeros((n, 2, 3))
    jac_pin[:, 0, 0] = cam.fx / zs
    jac_pin[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac_pin[:, 1, 1] = cam.fy / zs
    jac_pin[:, 1, 2] = -cam.fy * y / (zs * zs)
    jacs = jac_pin @ rot_wc
    covs = np.einsum("nij,njk,nlk->nil", jacs, cov3d, jacs)
    covs[:, 0, 0] += DILATION
    covs[:, 1, 1] += DILATION

    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(mid + disc, 0.0))
    on_screen = (
        (means[:, 0] + radius >= 0)
        & (means[:, 0] - radius <= cam.width - 1)
        & (means[:, 1] + radius >= 0)
        & (means[:, 1] - radius <= cam.height - 1)
    )
    keep = visible & on_screen
    return SplatBatch(
        node_ids=np.asarray(node_ids, dtype=np.int64)[keep],
        means=means[keep],
        covs=covs[keep],
        depths=z[keep],
        opacities=np.asarray(opacity, dtype=np.float64)[keep],
        colors=np.asarray(color, dtype=np.float64)[keep],
        jacs=jacs[keep],
    )


# ----------------------------------------------------------------------
# compositing kernels


@njit(cache=True, nogil=True)
def _composite_forward(
    means, inv_a, inv_b, inv_c, opacities, colors, bbox, offsets, height, width, want_buffers
):
    image = np.zeros((height, width, 3))
    transmit = np.ones((height, width))
    n = len(means)
    contrib = np.zeros(n)
    total = offsets[n] if want_buffers else 0
    alpha_buf = np.zeros(total)
    t_buf = np.zeros(total)
    for j in range(n):
        x0, x1, y0, y1 = bbox[j, 0], bbox[j, 1], bbox[j, 2], bbox[j, 3]
        if x1 < x0 or y1 < y0:
            continue
        mx, my = means[j, 0], means[j, 1]
        a, b, c = inv_a[j], inv_b[j], inv_c[j]
        op = opacities[j]
        col0, col1, col2 = colors[j, 0], colors[j, 1], colors[j, 2]
        row_w = x1 - x0 + 1
        base = offsets[j]
        for yi in range(y0, y1 + 1):
            dy = yi - my
            for xi in range(x0, x1 + 1):
                t_here = transmit[yi, xi]
                if t_here < T_STOP:
                    continue
                dx = xi - mx
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                if power < -5.6:  # alpha < 1/255 for any opacity <= 1
                    continue
                alpha = op * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                weight = alpha * t_here
                image[yi, xi, 0] += weight * col0
                image[yi, xi, 1] += weight * col1
                image[yi, xi, 2] += weight * col2
                contrib[j] += weight
                transmit[yi, xi] = t_here * (1.0 - alpha)
                if want_buffers:
                    idx = base + (yi - y0) * row_w + (xi - x0)
                    alpha_buf[idx] = alpha
                    t_buf[idx] = t_here
    return image, transmit, contrib, alpha_buf, t_buf


@njit(cache=True, nogil=True)
def _composite_backward(
    means,
    inv_a,
    inv_b,
    inv_c,
    opacities,
    colors,
    bbox,
    offsets,
    alpha_buf,
    t_buf,
    t_final,
    dl_dc,
    background,
):
    height, width = t_final.shape
    n = len(means)
    grad_color = np.zeros((n, 3))
    grad_opacity = np.zeros(n)
    grad_mean = np.zeros((n, 2))
    # suffix color: everything composited behind the splat being visited,
    # background included
    suffix = np.empty((height, width, 3))
    for yi in range(height):
        for xi in range(width):
            tf = t_final[yi, xi]
            suffix[yi, xi, 0] = background[0] * tf
            suffix[yi, xi, 1] = background[1] * tf
            suffix[yi, xi, 2] = background[2] * tf
    for j in range(n - 1, -1, -1):
        x0, x1, y0, y1 = bbox[j, 0], bbox[j, 1], bbox[j, 2], bbox[j, 3]
        if x1 < x0 or y1 < y0:
            continue
        mx, my = means[j, 0], means[j, 1]
        a, b, c = inv_a[j], inv_b[j], inv_c[j]
        op = opacities[j]
        col0, col1, col2 = colors[j, 0], colors[j, 1], colors[j, 2]
        row_w = x1 - x0 + 1
        base = offsets[j]
        for yi in range(y0, y1 + 1):
            dy = yi - my
            for xi in range(x0, x1 + 1):
                idx = base + (yi - y0) * row_w + (xi - x0)
                alpha = alpha_buf[idx]
                if alpha == 0.0:
                    continue  # skipped in the forward pass
                t_here = t_buf[idx]
                weight = alpha * t_here
                g0 = dl_dc[yi, xi, 0]
                g1 = dl_dc[yi, xi, 1]
                g2 = dl_dc[yi, xi, 2]
                grad_color[j, 0] += g0 * weight
                grad_color[j, 1] += g1 * weight
                grad_color[j, 2] += g2 * weight
                s0 = suffix[yi, xi, 0]
                s1 = suffix[yi, xi, 1]
                s2 = suffix[yi, xi, 2]
                inv_rest = 1.0 / (1.0 - alpha)
                dl_dalpha = (
                    g0 * (t_here * col0 - s0 * inv_rest)
                    + g1 * (t_here * col1 - s1 * inv_rest)
                    + g2 * (t_here * col2 - s2 * inv_rest)
                )
                if alpha < ALPHA_MAX:  # clamped alphas have zero derivative
                    dx = xi - mx
                    gauss = alpha / op
                    grad_opacity[j] += dl_dalpha * gauss
                    grad_mean[j, 0] += dl_dalpha * alpha * (a * dx + b * dy)
                    grad_mean[j, 1] += dl_dalpha * alpha * (b * dx + c * dy)
                suffix[yi, xi, 0] = s0 + weight * col0
                suffix[yi, xi, 1] = s1 + weight * col1
                suffix[yi, xi, 2] = s2 + weight * col2
    return grad_color, grad_opacity, grad_mean


# ----------------------------------------------------------------------
# render orchestration


def _as_batch(splats) -> SplatBatch:
    if isinstance(splats, SplatBatch):
        return splats
    return SplatBatch.from_splats(list(splats))


def render(
    splats,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    reference: np.ndarray | None = None,
) -> RenderOutput:
    """Composite splats front-to-back over the camera's viewport.

    ``splats`` is a list of :class:`Splat2D` or a :class:`SplatBatch`.
    With a ``reference`` image the mean-L1 loss and its analytic gradients
    per splat are computed as well.
    """
    batch = _as_batch(splats)
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if reference is not None:
        reference = np.asarray(reference, dtype=np.float64)
        if reference.shape != (h, w, 3):
            raise RenderError(
                f"reference shape {reference.shape} does not match {h}x{w} viewport"
            )

    order = np.lexsort((batch.node_ids, batch.depths))
    n = len(order)
    means = batch.means[order]
    covs = batch.covs[order]
    opac = batch.opacities[order]
    colors = batch.colors[order]
    node_ids = batch.node_ids[order]

    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    det = a * c - b * b
    if np.any(det < 1e-12):
        bad = int(node_ids[int(np.argmax(det < 1e-12))]) if n else -1
        raise SingularCovariance(f"cov2d determinant below 1e-12 (node {bad})")
    inv_a, inv_b, inv_c = c / det, -b / det, a / det

    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    half = BBOX_SIGMA * np.sqrt(mid + disc) if n else np.zeros(0)
    bbox = np.zeros((n, 4), dtype=np.int64)
    if n:
        bbox[:, 0] = np.clip(np.ceil(means[:, 0] - half), 0, w - 1).astype(np.int64)
        bbox[:, 1] = np.clip(np.floor(means[:, 0] + half), 0, w - 1).astype(np.int64)
        bbox[:, 2] = np.clip(np.ceil(means[:, 1] - half), 0, h - 1).astype(np.int64)
        bbox[:, 3] = np.clip(np.floor(means[:, 1] + half), 0, h - 1).astype(np.int64)
        # fully off-screen boxes collapse to empty ranges
        off = (means[:, 0] + half < 0) | (means[:, 0] - half > w - 1) | (
            means[:, 1] + half < 0
        ) | (means[:, 1] - half > h - 1)
        bbox[off, 1] = -1
        bbox[off, 0] = 0
        bbox[off, 3] = -1
        bbox[off, 2] = 0

    areas = np.maximum(bbox[:, 1] - bbox[:, 0] + 1, 0) * np.maximum(
        bbox[:, 3] - bbox[:, 2] + 1, 0
    )
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(areas, out=offsets[1:])

    want_grad = reference is not None
    image, t_final, contrib, alpha_buf, t_buf = _composite_forward(
        means, inv_a, inv_b, inv_c, opac, colors, bbox, offsets, h, w, want_grad
    )
    image = image + bg[None, None, :] * t_final[:, :, None]
    out = RenderOutput(
        image=image,
        alpha=1.0 - t_final,
        node_ids=node_ids,
        order=order,
        contrib=contrib,
    )
    if want_grad:
        diff = image - reference
        out.loss = float(np.mean(np.abs(diff)))
        dl_dc = np.sign(diff) / diff.size
        grad_color, grad_opacity, grad_mean = _composite_backward(
            means,
            inv_a,
            inv_b,
            inv_c,
            opac,
            colors,
            bbox,
            offsets,
            alpha_buf,
            t_buf,
            t_final,
            dl_dc,
            bg,
        )
        out.grad_color = grad_color
        out.grad_opacity = grad_opacity
        out.grad_mean2d = grad_mean
    return out
