"""Per-face importance scoring and stream-order construction.

A node's importance is the total rendering contribution of its Gaussian:
the sum of alpha times transmittance over every pixel of every scoring
camera, computed on the full (finest) model so occluded content scores
near zero.  The stream is then linearized level-major: one record per
subdivided node, records of shallower parents first, and within a level
sorted by the summed importance of the three children it activates
(descending, parent id breaking ties).  Level-major order alone guarantees
that any prefix only ever references already-decoded parents.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .binding import covariance_batch, resolve_batch
from .errors import SplatError
from .forest import Forest
from .mesh import FrameVertices, face_frames_batch
from .renderer import project_batch, render


class ImportanceError(SplatError):
    pass


@dataclass
class StreamOrder:
    """Refinement records to stream, in transmission order."""

    parent_ids: list[int]
    levels: list[int]
    importances: list[float]

    def __len__(self) -> int:
        return len(self.parent_ids)

    def records(self):
        return zip(self.parent_ids, self.levels, self.importances)


def face_scores(forest: Forest, cameras, frame: FrameVertices) -> np.ndarray:
    """Aggregated rendering contribution of every node's Gaussian, summed
    over all pixels of all cameras; index = node id."""
    if not cameras:
        raise ImportanceError("need at least one scoring camera")
    n = len(forest)
    params = forest.gather_params()
    corners = forest.resolve_all_corners(frame)
    r, t, s = face_frames_batch(corners)
    mu, rot, scale = resolve_batch(
        params["delta_mu"], params["delta_rot"], params["delta_scale"], r, t, s
    )
    cov3d = covariance_batch(rot, scale)
    node_ids = np.arange(n, dtype=np.int64)
    scores = np.zeros(n)
    for cam in cameras:
        batch = project_batch(node_ids, mu, cov3d, params["opacity"], params["color"], cam)
        out = render(batch, cam)
        scores[out.node_ids] += out.contrib
    return scores


def build_order(forest: Forest, scores: np.ndarray) -> StreamOrder:
    """Level-major, importance-descending record order for all splits."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(forest):
        raise ImportanceError(
            f"got {len(scores)} scores for {len(forest)} nodes"
        )
    entries = []
    for node in forest.nodes:
        if node.children is None:
            continue
        importance = float(sum(scores[c] for c in node.children))
        entries.append((node.level, -importance, node.node_id))
    entries.sort()
    return StreamOrder(
        parent_ids=[e[2] for e in entries],
        levels=[e[0] for e in entries],
        importances=[-e[1] for e in entries],
    )


def write_ranking_csv(order: StreamOrder, path, seed: int | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["record_index", "parent_node_id", "level", "importance"])
        for idx, (pid, level, imp) in enumerate(order.records()):
            writer.writerow([idx, pid, level, f"{imp:.12g}"])
