"""Independent reference implementations used to check the library.

Everything here is written the obvious, slow way on purpose: per-pixel
loops, explicit recursion, grid searches.  None of it shares code with the
package beyond the documented compositing and binding rules.
"""

import math

import numpy as np

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4


def naive_render(splats, width, height, background, reference=None):
    """Per-pixel front-to-back compositing, one splat at a time.

    ``splats`` is a list of objects with mean2d/cov2d/depth/opacity/color
    and node_id.  Returns (image, per-splat contrib dict).
    """
    order = sorted(range(len(splats)), key=lambda i: (splats[i].depth, splats[i].node_id))
    image = np.zeros((height, width, 3))
    contrib = {s.node_id: 0.0 for s in splats}
    for yi in range(height):
        for xi in range(width):
            t_here = 1.0
            pixel = np.zeros(3)
            for idx in order:
                s = splats[idx]
                if t_here < T_STOP:
                    break
                a, b = s.cov2d[0, 0], s.cov2d[0, 1]
                c = s.cov2d[1, 1]
                det = a * c - b * b
                ia, ib, ic = c / det, -b / det, a / det
                dx = xi - s.mean2d[0]
                dy = yi - s.mean2d[1]
                power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                alpha = s.opacity * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                weight = alpha * t_here
                pixel += weight * np.asarray(s.color)
                contrib[s.node_id] += weight
                t_here *= 1.0 - alpha
            image[yi, xi] = pixel + t_here * np.asarray(background)
    return image, contrib


def resolve_corners_recursive(forest, node_id, positions):
    """Standalone recursive corner resolution over a forest's structure.

    Reads only node fields (corners, beta); no use of the library's
    resolution code paths.
    """
    from splatstream.forest import TemplateVertex

    def point_of(ref):
        if isinstance(ref, TemplateVertex):
            return np.asarray(positions[ref.index], dtype=np.float64)
        owner = forest.nodes[ref.node_id]
        corners = [point_of(c) for c in owner.corners]
        beta = owner.beta
        return (
            beta[0] * corners[0] + beta[1] * corners[1] + beta[2] * corners[2]
        )

    node = forest.nodes[node_id]
    return np.stack([point_of(c) for c in node.corners])


def simplex_grid(step=1e-3):
    """All grid points of the 2-simplex with the given resolution."""
    n = int(round(1.0 / step))
    pts = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            a = i * step
            b = j * step
            pts.append((a, b, 1.0 - a - b))
    return np.asarray(pts)


def edge_length_mean(v0, v1, v2):
    """Mean of the three triangle edge lengths, computed longhand."""
    def dist(p, q):
        return math.sqrt(sum((float(pi) - float(qi)) ** 2 for pi, qi in zip(p, q)))

    return (dist(v0, v1) + dist(v1, v2) + dist(v2, v0)) / 3.0


def random_rigid_transform(rng):
    """Random rotation (QR-based) and translation."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    t = rng.normal(size=3) * 2.0
    return q, t
