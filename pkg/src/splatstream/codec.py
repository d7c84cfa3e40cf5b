"""Prefix-decodable binary asset format (``.pgav``).

Layout, little-endian throughout::

    header   12 bytes   magic "PGAV" | u16 version=1 | u16 flags=0 |
                        u32 template_face_count
    base     56 bytes per template face: the level-0 Gaussian payloads in
             node-id order
    records  188 bytes each, in stream order

    payload (56) = 3*f32 delta_mu | 4*f32 quaternion (w,x,y,z) |
                   3*f32 delta_scale | f32 opacity | 3*f32 color
    record (188) = u32 parent_node_id | u8 parent level | 3 zero bytes |
                   3*f32 beta | 3 payloads (child order = forest order)

The record count is not stored: it is implied by the byte length
(``size = 12 + 56*F + 188*R``), which keeps every record boundary a valid
truncation point.  Child node ids are implicit (the decoder assigns three
consecutive ids per record), so the encoder remaps its own ids to that
canonical numbering while writing.  Decoding any prefix of a valid file
yields a renderable state: the header and base section are mandatory, a
trailing partial record is ignored, and every field of a complete record
is validated before it mutates the forest.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .binding import GaussianResidual
from .errors import SplatError
from .forest import DepthCapReached, Forest, InvalidBarycentric, NotALeaf
from .importance import StreamOrder
from .mesh import TemplateMesh

MAGIC = b"PGAV"
VERSION = 1
HEADER_SIZE = 12
PAYLOAD_SIZE = 56
RECORD_SIZE = 188

_HEADER = struct.Struct("<4sHHI")
_PAYLOAD = struct.Struct("<14f")
_RECORD_HEAD = struct.Struct("<IB3s3f")

BETA_DECODE_TOL = 1e-4

# decoded forests are not depth-capped; any level a valid record chain can
# reach is structurally legal
_DECODE_MAX_LEVEL = 1 << 30


class CodecError(SplatError):
    pass


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class TruncatedAsset(CodecError):
    pass


class CorruptRecord(CodecError):
    pass


class MissingParent(CodecError):
    pass


class DoubleSubdivision(CodecError):
    pass


class InvalidOrder(CodecError):
    pass


@dataclass(frozen=True)
class AssetHeader:
    template_face_count: int
    record_count: int
    version: int = VERSION
    flags: int = 0


@dataclass
class DecodedState:
    """Receiver-side forest plus how many refinement records built it."""

    forest: Forest
    records_applied: int


def asset_size(face_count: int, record_count: int) -> int:
    return HEADER_SIZE + PAYLOAD_SIZE * face_count + RECORD_SIZE * record_count


def base_size(face_count: int) -> int:
    return HEADER_SIZE + PAYLOAD_SIZE * face_count


def _pack_payload(g: GaussianResidual) -> bytes:
    return _PAYLOAD.pack(
        *np.asarray(g.delta_mu, dtype=np.float32),
        *np.asarray(g.delta_rot, dtype=np.float32),
        *np.asarray(g.delta_scale, dtype=np.float32),
        np.float32(g.opacity),
        *np.asarray(g.color, dtype=np.float32),
    )


def _unpack_payload(chunk: bytes) -> GaussianResidual:
    vals = _PAYLOAD.unpack(chunk)
    if not all(np.isfinite(v) for v in vals):
        raise CorruptRecord("non-finite payload value")
    delta_mu = np.array(vals[0:3], dtype=np.float64)
    delta_rot = np.array(vals[3:7], dtype=np.float64)
    delta_scale = np.array(vals[7:10], dtype=np.float64)
    opacity = float(vals[10])
    color = np.array(vals[11:14], dtype=np.float64)
    norm = float(np.linalg.norm(delta_rot))
    if abs(norm - 1.0) > 1e-6:
        raise CorruptRecord(f"quaternion norm {norm} out of tolerance")
    if np.any(delta_scale <= 0):
        raise CorruptRecord("non-positive delta_scale")
    if opacity < 0.0 or opacity > 1.0 or np.any(color < 0.0) or np.any(color > 1.0):
        raise CorruptRecord("opacity/color outside [0, 1]")
    return GaussianResidual(
        delta_mu=delta_mu,
        delta_rot=delta_rot,
        delta_scale=delta_scale,
        opacity=opacity,
        color=color,
    )


@dataclass
class RefinementRecord:
    parent_node_id: int
    level: int
    beta: np.ndarray
    children: tuple[GaussianResidual, GaussianResidual, GaussianResidual]


def parse_record(chunk: bytes) -> RefinementRecord:
    parent_id, level, pad, b0, b1, b2 = _RECORD_HEAD.unpack(chunk[:20])
    if pad != b"\x00\x00\x00":
        raise CorruptRecord("nonzero record padding")
    beta = np.array([b0, b1, b2], dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise CorruptRecord("non-finite beta")
    if np.any(beta < -BETA_DECODE_TOL) or abs(float(beta.sum()) - 1.0) > BETA_DECODE_TOL:
        raise CorruptRecord(f"beta {beta} off the simplex")
    children = tuple(
        _unpack_payload(chunk[20 + i * PAYLOAD_SIZE : 20 + (i + 1) * PAYLOAD_SIZE])
        for i in range(3)
    )
    return RefinementRecord(
        parent_node_id=int(parent_id), level=int(level), beta=beta, children=children
    )


# ----------------------------------------------------------------------
# encode


def encode(forest: Forest, order: StreamOrder, sink) -> int:
    """Write the asset to a binary file object; returns bytes written.

    Records must be ordered so each parent either is a root or was created
    by an earlier record (level-major order guarantees this); otherwise
    :class:`InvalidOrder` is raised.  Encoded ids follow the decoder's
    canonical numbering, not the in-memory ids.
    """
    roots = forest.root_count
    written = 0
    written += sink.write(_HEADER.pack(MAGIC, VERSION, 0, roots))
    for nid in range(roots):
        written += sink.write(_pack_payload(forest.node(nid).gaussian))
    remap = {nid: nid for nid in range(roots)}
    next_id = roots
    for pid, level, _ in order.records():
        node = forest.node(pid)
        if node.children is None:
            raise InvalidOrder(f"node {pid} has no subdivision to stream")
        if pid not in remap:
            raise InvalidOrder(
                f"record for node {pid} precedes the record creating it"
            )
        if node.level != level:
            raise InvalidOrder(
                f"order says node {pid} is level {level}, forest says {node.level}"
            )
        if node.level > 255:
            raise InvalidOrder(f"level {node.level} does not fit the u8 wire field")
        written += sink.write(
            _RECORD_HEAD.pack(
                remap[pid],
                node.level,
                b"\x00\x00\x00",
                *np.asarray(node.beta, dtype=np.float32),
            )
        )
        for child in node.children:
            written += sink.write(_pack_payload(forest.node(child).gaussian))
            remap[child] = next_id
            next_id += 1
    return written


def encode_bytes(forest: Forest, order: StreamOrder) -> bytes:
    buf = io.BytesIO()
    encode(forest, order, buf)
    return buf.getvalue()


# ----------------------------------------------------------------------
# decode


def parse_header(data: bytes) -> AssetHeader:
    if len(data) < HEADER_SIZE:
        raise TruncatedAsset(f"{len(data)} bytes is shorter than the header")
    magic, version, flags, face_count = _HEADER.unpack(data[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if flags != 0:
        raise UnsupportedVersion(f"unknown flags 0x{flags:04x}")
    body = len(data) - base_size(face_count)
    record_count = max(body, 0) // RECORD_SIZE
    return AssetHeader(template_face_count=face_count, record_count=record_count)


def apply_record(state: DecodedState, record: RefinementRecord) -> DecodedState:
    """Apply one parsed record to the decoded forest in place."""
    forest = state.forest
    if record.parent_node_id >= len(forest) or record.parent_node_id < 0:
        raise MissingParent(f"parent {record.parent_node_id} not decoded yet")
    parent = forest.node(record.parent_node_id)
    if parent.children is not None:
        raise DoubleSubdivision(f"node {record.parent_node_id} already subdivided")
    if parent.level != record.level:
        raise CorruptRecord(
            f"record level {record.level} != parent level {parent.level}"
        )
    try:
        forest.subdivide(
            record.parent_node_id,
            beta=record.beta,
            child_gaussians=list(record.children),
        )
    except (NotALeaf, InvalidBarycentric, DepthCapReached) as exc:
        raise CorruptRecord(str(exc)) from exc
    state.records_applied += 1
    return state


def decode_prefix(data: bytes, mesh: TemplateMesh) -> DecodedState:
    """Decode any byte prefix of a valid asset against its template mesh.

    The header and full base section are required; after that, every
    complete 188-byte record is applied and a trailing partial record is
    silently ignored.
    """
    header = parse_header(data)
    if header.template_face_count != mesh.face_count:
        raise CorruptRecord(
            f"asset has {header.template_face_count} template faces, "
            f"mesh has {mesh.face_count}"
        )
    start = base_size(header.template_face_count)
    if len(data) < start:
        raise TruncatedAsset("base section incomplete")
    forest = Forest(mesh, max_level=_DECODE_MAX_LEVEL)
    for nid in range(header.template_face_count):
        off = HEADER_SIZE + nid * PAYLOAD_SIZE
        forest.node(nid).gaussian = _unpack_payload(data[off : off + PAYLOAD_SIZE])
    state = DecodedState(forest=forest, records_applied=0)
    pos = start
    while pos + RECORD_SIZE <= len(data):
        apply_record(state, parse_record(data[pos : pos + RECORD_SIZE]))
        pos += RECORD_SIZE
    return state
