"""Per-template-face subdivision hierarchy with face-bound Gaussians.

Every template face owns a tree of ``FaceNode``s.  Subdividing a node
inserts one barycentric point (its ``beta``) inside the triangle and fans
it into three children, each child keeping two parent corners plus the new
split point.  Corners are therefore references (a template vertex index
or the split point of an ancestor), and concrete positions are only
materialized per animation frame by recursively evaluating the barycentric
combinations down the ancestor chain.

Node ids are dense and append-only: roots occupy ids ``0..F-1`` in face
order and every subdivision appends exactly three ids.  Nothing is ever
removed or reordered, which is what makes prefix-decoded forests exact
sub-states of the full one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binding import GaussianResidual
from .errors import SplatError
from .mesh import FrameVertices, TemplateMesh

SIMPLEX_TOL = 1e-6

CENTROID_BETA = np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])


class ForestError(SplatError):
    pass


class InvalidBarycentric(ForestError):
    pass


class NotALeaf(ForestError):
    pass


class DepthCapReached(ForestError):
    pass


@dataclass(frozen=True)
class TemplateVertex:
    """Corner reference into the template mesh's vertex array."""

    index: int


@dataclass(frozen=True)
class SplitPoint:
    """Corner reference to the split point of the node that owns it."""

    node_id: int


CornerRef = TemplateVertex | SplitPoint


def child_vertex(beta: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Barycentric combination ``beta[0]*c0 + beta[1]*c1 + beta[2]*c2``.

    ``beta`` must lie on the simplex up to ``SIMPLEX_TOL``; ``corners`` is
    a (3, 3) array of positions.
    """
    beta = np.asarray(beta, dtype=np.float64).reshape(3)
    if (
        not np.all(np.isfinite(beta))
        or np.any(beta < -SIMPLEX_TOL)
        or abs(float(beta.sum()) - 1.0) > SIMPLEX_TOL
    ):
        raise InvalidBarycentric(f"beta {beta} is not on the simplex")
    corners = np.asarray(corners, dtype=np.float64).reshape(3, 3)
    return beta @ corners


def project_simplex(beta_raw: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {beta >= 0, sum(beta) = 1}.

    Sort-based algorithm; idempotent, and exact (up to rounding) for inputs
    already on the simplex.
    """
    v = np.asarray(beta_raw, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidBarycentric("cannot project non-finite input")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(v) + 1)
    cond = u - (css - 1.0) / ks > 0
    rho = int(np.nonzero(cond)[0][-1])
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_simplex_batch(raw: np.ndarray) -> np.ndarray:
    """Row-wise :func:`project_simplex` for an (M, K) array."""
    v = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidBarycentric("cannot project non-finite input")
    k = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1)
    cond = u - (css - 1.0) / np.arange(1, k + 1) > 0
    rho = (k - 1) - np.argmax(cond[:, ::-1], axis=1)
    theta = (np.take_along_axis(css, rho[:, None], axis=1)[:, 0] - 1.0) / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


@dataclass
class FaceNode:
    """One face of the forest: structure, growth statistics, one Gaussian."""

    node_id: int
    level: int
    parent: int | None
    corners: tuple[CornerRef, CornerRef, CornerRef]
    gaussian: GaussianResidual
    beta: np.ndarray | None = None
    children: tuple[int, int, int] | None = None
    grad_accum: float = 0.0
    grad_samples: int = 0
    importance: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.children is None


class Forest:
    """Append-only store of :class:`FaceNode`s over a template mesh."""

    def __init__(self, mesh: TemplateMesh, max_level: int = 4, depth_cap: int | None = None):
        if max_level < 0:
            raise ForestError("max_level must be >= 0")
        self.mesh = mesh
        self.max_level = max_level
        self.current_depth_cap = max_level if depth_cap is None else depth_cap
        self.nodes: list[FaceNode] = []
        for fid, face in enumerate(mesh.faces):
            self.nodes.append(
                FaceNode(
                    node_id=fid,
                    level=0,
                    parent=None,
                    corners=(
                        TemplateVertex(int(face[0])),
                        TemplateVertex(int(face[1])),
                        TemplateVertex(int(face[2])),
                    ),
                    gaussian=GaussianResidual(),
                )
            )
        # structure caches, rebuilt lazily after subdivisions
        self._struct_version = 0
        self._cached_version = -1
        self._corner_kind: np.ndarray | None = None
        self._corner_idx: np.ndarray | None = None
        self._levels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root_count(self) -> int:
        return self.mesh.face_count

    def node(self, node_id: int) -> FaceNode:
        return self.nodes[node_id]

    def max_level_present(self) -> int:
        return max(n.level for n in self.nodes)

    def leaves(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.is_leaf]

    def leaves_at_finest(self) -> list[int]:
        """Leaves whose level equals the deepest level present in the forest."""
        finest = self.max_level_present()
        return [n.node_id for n in self.nodes if n.is_leaf and n.level == finest]

    def subdivide(
        self,
        node_id: int,
        beta: np.ndarray | None = None,
        child_gaussians=None,
    ) -> tuple[int, int, int]:
        """Split a leaf into three children around one interior point.

        ``beta`` defaults to the centroid; child ``c`` keeps parent corners
        ``c`` and ``(c + 1) % 3`` plus the new split point, so ids and
        corner order are fully deterministic.  The parent's Gaussian stays
        active; children get fresh defaults unless ``child_gaussians``
        provides them (as the codec does when replaying a stream).
        """
        node = self.nodes[node_id]
        if not node.is_leaf:
            raise NotALeaf(f"node {node_id} already has children")
        cap = min(self.current_depth_cap, self.max_level)
        if node.level >= cap:
            raise DepthCapReached(
                f"node {node_id} at level {node.level} cannot exceed cap {cap}"
            )
        if beta is None:
            beta = CENTROID_BETA
        beta = np.asarray(beta, dtype=np.float64).reshape(3).copy()
        if (
            not np.all(np.isfinite(beta))
            or np.any(beta < -SIMPLEX_TOL)
            or abs(float(beta.sum()) - 1.0) > SIMPLEX_TOL
        ):
            raise InvalidBarycentric(f"beta {beta} is not on the simplex")
        if child_gaussians is None:
            child_gaussians = [GaussianResidual() for _ in range(3)]
        if len(child_gaussians) != 3:
            raise ForestError("exactly three child Gaussians required")

        first = len(self.nodes)
        ids = (first, first + 1, first + 2)
        for c in range(3):
            self.nodes.append(
                FaceNode(
                    node_id=ids[c],
                    level=node.level + 1,
                    parent=node_id,
                    corners=(
                        node.corners[c],
                        node.corners[(c + 1) % 3],
                        SplitPoint(node_id),
                    ),
                    gaussian=child_gaussians[c],
                )
            )
        node.beta = beta
        node.children = ids
        self._struct_version += 1
        return ids

    def root_ancestor(self, node_id: int) -> int:
        nid = node_id
        while self.nodes[nid].parent is not None:
            nid = self.nodes[nid].parent
        return nid

    # ------------------------------------------------------------------
    # resolution

    def _corner_position(
        self, ref: CornerRef, vertices: FrameVertices, cache: dict[int, np.ndarray]
    ) -> np.ndarray:
        if isinstance(ref, TemplateVertex):
            return vertices.positions[ref.index]
        owner = self.nodes[ref.node_id]
        if owner.node_id not in cache:
            corners = np.stack(
                [self._corner_position(c, vertices, cache) for c in owner.corners]
            )
            cache[owner.node_id] = child_vertex(owner.beta, corners)
        return cache[owner.node_id]

    def resolve_corners(self, node_id: int, vertices: FrameVertices) -> np.ndarray:
        """Concrete (3, 3) corner positions of a node under one frame."""
        cache: dict[int, np.ndarray] = {}
        node = self.nodes[node_id]
        return np.stack(
            [self._corner_position(c, vertices, cache) for c in node.corners]
        )

    def _structure_arrays(self):
        # corner refs and levels as arrays; kind 0 = template vertex, 1 = split point
        if self._cached_version != self._struct_version:
            n = len(self.nodes)
            kind = np.zeros((n, 3), dtype=np.uint8)
            idx = np.zeros((n, 3), dtype=np.int64)
            levels = np.zeros(n, dtype=np.int64)
            for node in self.nodes:
                levels[node.node_id] = node.level
                for c, ref in enumerate(node.corners):
                    if isinstance(ref, TemplateVertex):
                        idx[node.node_id, c] = ref.index
                    else:
                        kind[node.node_id, c] = 1
                        idx[node.node_id, c] = ref.node_id
            self._corner_kind = kind
            self._corner_idx = idx
            self._levels = levels
            self._cached_version = self._struct_version
        return self._corner_kind, self._corner_idx, self._levels

    def levels_array(self) -> np.ndarray:
        return self._structure_arrays()[2]

    def resolve_all_corners(self, vertices: FrameVertices) -> np.ndarray:
        """Corner positions of every node, shape (N, 3, 3).

        Split points are evaluated level by level (an ancestor's split point
        always belongs to a shallower node), then all corners are gathered in
        one shot.  Equivalent to calling :meth:`resolve_corners` per node.
        """
        kind, idx, levels = self._structure_arrays()
        n = len(self.nodes)
        pos = vertices.positions

        def gather(k: np.ndarray, ix: np.ndarray) -> np.ndarray:
            out = np.empty(k.shape + (3,))
            tv = k == 0
            out[tv] = pos[ix[tv]]
            out[~tv] = split_pos[ix[~tv]]
            return out

        split_pos = np.zeros((n, 3))
        sub_ids = np.array(
            [nd.node_id for nd in self.nodes if nd.beta is not None], dtype=np.int64
        )
        if len(sub_ids):
            betas = np.stack([self.nodes[i].beta for i in sub_ids])
            for lvl in range(int(levels[sub_ids].max()) + 1):
                on_level = levels[sub_ids] == lvl
                if not on_level.any():
                    continue
                sel = sub_ids[on_level]
                corner_pos = gather(kind[sel], idx[sel])
                split_pos[sel] = np.einsum("nk,nkd->nd", betas[on_level], corner_pos)
        return gather(kind, idx)

    # ------------------------------------------------------------------
    # parameter gather/scatter used by the fitter and codec

    def gather_params(self):
        """Per-node parameter arrays in node-id order.

        Returns a dict of fresh arrays: delta_mu (N,3), delta_rot (N,4),
        delta_scale (N,3), opacity (N,), color (N,3).
        """
        n = len(self.nodes)
        out = {
            "delta_mu": np.empty((n, 3)),
            "delta_rot": np.empty((n, 4)),
            "delta_scale": np.empty((n, 3)),
            "opacity": np.empty(n),
            "color": np.empty((n, 3)),
        }
        for node in self.nodes:
            g = node.gaussian
            out["delta_mu"][node.node_id] = g.delta_mu
            out["delta_rot"][node.node_id] = g.delta_rot
            out["delta_scale"][node.node_id] = g.delta_scale
            out["opacity"][node.node_id] = g.opacity
            out["color"][node.node_id] = g.color
        return out
