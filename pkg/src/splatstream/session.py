"""Bandwidth-budgeted streaming simulation and prefix rendering.

A session replays an encoded asset through a bandwidth profile: the base
section is delivered atomically up front (a complete coarse model before
any refinement), then each tick delivers a byte budget's worth of
refinement records, optionally restricted to the subtrees of a region
mask.  After every tick the current decoded state is rendered for all
cameras and compared against the full-asset render, which isolates
streaming fidelity from fitting fidelity.

``render_prefix`` is the one-shot variant: decode a byte prefix (snapped
down to a record boundary, never below the base) and render it.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .binding import covariance_batch, resolve_batch
from .codec import (
    RECORD_SIZE,
    apply_record,
    base_size,
    decode_prefix,
    parse_header,
    parse_record,
)
from .errors import SplatError
from .forest import Forest
from .mesh import Camera, FrameVertices, TemplateMesh, face_frames_batch, write_ppm
from .renderer import project_batch, render

PSNR_CAP = 99.0


class SessionError(SplatError):
    pass


@dataclass(frozen=True)
class BandwidthProfile:
    """Per-tick delivery budget.

    Either a constant rate (ticks repeat until the stream is exhausted) or
    a finite list of ``(tick_duration_s, bytes_per_tick)`` segments, one
    tick each (the session ends when the segments run out, delivered or
    not).
    """

    segments: tuple = ()
    constant_bytes_per_tick: int | None = None
    constant_tick_s: float = 1.0

    def __post_init__(self):
        if self.constant_bytes_per_tick is None and not self.segments:
            raise SessionError("profile needs a constant rate or segments")
        if self.constant_bytes_per_tick is not None and self.constant_bytes_per_tick < 0:
            raise SessionError("bytes_per_tick must be >= 0")
        for dur, budget in self.segments:
            if dur <= 0 or budget < 0:
                raise SessionError(f"bad segment ({dur}, {budget})")

    @classmethod
    def constant(cls, bytes_per_tick: int, tick_s: float = 1.0) -> "BandwidthProfile":
        return cls(constant_bytes_per_tick=int(bytes_per_tick), constant_tick_s=tick_s)

    @classmethod
    def from_segments(cls, segments) -> "BandwidthProfile":
        return cls(segments=tuple((float(d), int(b)) for d, b in segments))

    def ticks(self, total_bytes: int):
        """Yield (duration, budget) ticks; finite for every valid input."""
        if self.constant_bytes_per_tick is not None:
            budget = self.constant_bytes_per_tick
            if budget == 0 or total_bytes == 0:
                return
            for _ in range(math.ceil(total_bytes / budget)):
                yield self.constant_tick_s, budget
        else:
            yield from self.segments


@dataclass(frozen=True)
class RegionMask:
    """Template root face ids whose subtrees may be refined."""

    face_ids: frozenset

    def __post_init__(self):
        object.__setattr__(self, "face_ids", frozenset(int(f) for f in self.face_ids))

    def validate(self, face_count: int) -> None:
        bad = [f for f in self.face_ids if f < 0 or f >= face_count]
        if bad:
            raise SessionError(f"mask face ids {sorted(bad)} out of range")


@dataclass
class SessionMetrics:
    """One row per checkpoint: cumulative bytes, decoded records/nodes, and
    quality against the full-asset render."""

    rows: list[dict] = field(default_factory=list)

    def append(self, bytes_received, records, nodes, l1, psnr, ms):
        self.rows.append(
            {
                "bytes": int(bytes_received),
                "records": int(records),
                "nodes": int(nodes),
                "l1": float(l1),
                "psnr": float(psnr),
                "ms": float(ms),
            }
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bytes", "records", "nodes", "l1", "psnr", "ms"])
            for row in self.rows:
                writer.writerow(
                    [
                        row["bytes"],
                        row["records"],
                        row["nodes"],
                        f"{row['l1']:.12g}",
                        f"{row['psnr']:.6g}",
                        f"{row['ms']:.3f}",
                    ]
                )


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def render_forest(
    forest: Forest, cam: Camera, frame: FrameVertices, background=(0.0, 0.0, 0.0)
):
    """Resolve, project, and composite every node of a forest."""
    params = forest.gather_params()
    corners = forest.resolve_all_corners(frame)
    r, t, s = face_frames_batch(corners)
    mu, rot, scale = resolve_batch(
        params["delta_mu"], params["delta_rot"], params["delta_scale"], r, t, s
    )
    cov3d = covariance_batch(rot, scale)
    batch = project_batch(
        np.arange(len(forest), dtype=np.int64),
        mu,
        cov3d,
        params["opacity"],
        params["color"],
        cam,
    )
    return render(batch, cam, background)


def _eligible_offsets(asset: bytes, mask: RegionMask | None) -> list[int]:
    """Byte offsets of the records a session may deliver, in stream order.

    Mask filtering needs each record's root template ancestor, which is
    found by replaying parents through the canonical id assignment (roots
    are their own ancestors; record k's children inherit its parent's
    root).
    """
    header = parse_header(asset)
    if mask is not None:
        mask.validate(header.template_face_count)
    start = base_size(header.template_face_count)
    body = len(asset) - start
    if body % RECORD_SIZE != 0:
        raise SessionError("asset has a partial trailing record")
    roots = list(range(header.template_face_count))
    root_of = {nid: nid for nid in roots}
    next_id = header.template_face_count
    offsets = []
    for k in range(header.record_count):
        off = start + k * RECORD_SIZE
        parent_id = int.from_bytes(asset[off : off + 4], "little")
        if parent_id not in root_of:
            raise SessionError(f"record {k} references unknown parent {parent_id}")
        root = root_of[parent_id]
        for _ in range(3):
            root_of[next_id] = root
            next_id += 1
        if mask is None or root in mask.face_ids:
            offsets.append(off)
    return offsets


def run_session(
    asset: bytes,
    profile: BandwidthProfile,
    cameras,
    frame: FrameVertices,
    mesh: TemplateMesh,
    mask: RegionMask | None = None,
    background=(0.0, 0.0, 0.0),
    dump_dir=None,
) -> SessionMetrics:
    """Stream the asset through the profile and log quality per checkpoint."""
    full_state = decode_prefix(asset, mesh)  # validates the whole asset
    full_renders = [
        render_forest(full_state.forest, cam, frame, background).image
        for cam in cameras
    ]

    offsets = _eligible_offsets(asset, mask)
    total_eligible = len(offsets) * RECORD_SIZE

    header = parse_header(asset)
    start = base_size(header.template_face_count)
    state = decode_prefix(asset[:start], mesh)

    metrics = SessionMetrics()

    def checkpoint(bytes_received: int):
        t0 = time.perf_counter()
        images = [
            render_forest(state.forest, cam, frame, background).image
            for cam in cameras
        ]
        ms = (time.perf_counter() - t0) * 1e3
        diffs = [img - full for img, full in zip(images, full_renders)]
        l1 = float(np.mean([np.mean(np.abs(d)) for d in diffs]))
        mse = float(np.mean([np.mean(d * d) for d in diffs]))
        metrics.append(
            bytes_received,
            state.records_applied,
            len(state.forest),
            l1,
            psnr_from_mse(mse),
            ms,
        )
        if dump_dir is not None:
            idx = len(metrics.rows) - 1
            for ci, img in enumerate(images):
                write_ppm(f"{dump_dir}/checkpoint_{idx:04d}_cam{ci}.ppm", img)

    # the base section is atomic: delivered before the first checkpoint
    checkpoint(start)

    # Masked sessions skip records, which shifts the implicit child-id
    # numbering: translate the asset's canonical parent ids into this
    # session's local ids as records are applied.  Eligibility is closed
    # under ancestry (a record and its ancestors share the root face), so
    # every needed parent is in the map.
    face_count = header.template_face_count
    id_map = {nid: nid for nid in range(face_count)}
    delivered = 0
    applied = 0
    for _, budget in profile.ticks(total_eligible):
        delivered = min(delivered + budget, total_eligible)
        while (applied + 1) * RECORD_SIZE <= delivered:
            off = offsets[applied]
            record = parse_record(asset[off : off + RECORD_SIZE])
            local_parent = id_map.get(record.parent_node_id)
            if local_parent is None:
                raise SessionError(
                    f"record at offset {off} references parent "
                    f"{record.parent_node_id} outside the delivered set"
                )
            canonical_first = face_count + 3 * ((off - start) // RECORD_SIZE)
            local_first = len(state.forest)
            apply_record(state, replace(record, parent_node_id=local_parent))
            for c in range(3):
                id_map[canonical_first + c] = local_first + c
            applied += 1
        checkpoint(start + delivered)
        if delivered >= total_eligible:
            break
    return metrics


def prefix_byte_count(asset_len: int, face_count: int, fraction: float) -> int:
    """Bytes of the asset a given fraction covers, snapped down to a record
    boundary and clamped so the base section is never split."""
    if not 0.0 <= fraction <= 1.0:
        raise SessionError(f"fraction {fraction} outside [0, 1]")
    start = base_size(face_count)
    n = math.floor(fraction * asset_len)
    if n <= start:
        return start
    return start + ((n - start) // RECORD_SIZE) * RECORD_SIZE


def render_prefix(
    asset: bytes,
    camera: Camera,
    frame: FrameVertices,
    mesh: TemplateMesh,
    fraction: float | None = None,
    byte_count: int | None = None,
    background=(0.0, 0.0, 0.0),
) -> np.ndarray:
    """Decode a prefix of the asset and render it from one camera."""
    if (fraction is None) == (byte_count is None):
        raise SessionError("give exactly one of fraction or byte_count")
    header = parse_header(asset)
    if fraction is not None:
        byte_count = prefix_byte_count(len(asset), header.template_face_count, fraction)
    byte_count = max(byte_count, base_size(header.template_face_count))
    state = decode_prefix(asset[: int(byte_count)], mesh)
    return render_forest(state.forest, camera, frame, background).image
