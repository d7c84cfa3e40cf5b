"""Fixed-topology triangle meshes, per-frame vertex positions, face-local
frames, and the file formats the pipeline reads and writes.

A mesh is split into immutable topology (``TemplateMesh``) and per-frame
geometry (``FrameVertices``): the face list never changes while vertex
positions are swapped per animation frame.  ``face_frame`` turns one
triangle of one frame into a (rotation, centroid, scale) local frame;
everything anchored to a face is expressed relative to that frame.

File formats (all little machinery, kept here so every module shares one
implementation):

* OBJ subset: ``v x y z`` and ``f a b c`` lines, 1-based indices,
  triangles only.
* Animation frames: a JSON array of frames, each a flat list of
  ``3 * vertex_count`` numbers.
* Cameras: JSON object (or array of objects) with ``fx, fy, cx, cy,
  width, height`` and a row-major 16-element ``world_to_camera``.
* Images: binary PPM (P6, 8-bit), values mapped to/from [0, 1] floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SplatError

DEGENERATE_AREA = 1e-12
ORTHONORMAL_TOL = 1e-6


class MeshError(SplatError):
    pass


class ParseError(MeshError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonTriangleFace(ParseError):
    pass


class DegenerateFace(MeshError):
    pass


@dataclass(frozen=True)
class TemplateMesh:
    """Immutable triangle topology: vertex count plus (F, 3) index array."""

    vertex_count: int
    faces: np.ndarray

    def __post_init__(self):
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= self.vertex_count):
            raise MeshError("face index out of range")
        for axis in range(3):
            if np.any(faces[:, axis] == faces[:, (axis + 1) % 3]):
                raise MeshError("degenerate face: repeated vertex index")
        faces.setflags(write=False)
        object.__setattr__(self, "faces", faces)

    @property
    def face_count(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class FrameVertices:
    """Vertex positions for one animation frame, (V, 3) float64."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise MeshError(f"positions must be (V, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise MeshError("non-finite vertex coordinate")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class FaceFrame:
    """Local frame of one triangle: rotation ``r`` (columns = tangent,
    bitangent, normal), centroid ``t``, and scale ``s`` (mean edge length)."""

    r: np.ndarray
    t: np.ndarray
    s: float


def face_frame(vertices: FrameVertices, face) -> FaceFrame:
    """Local frame of ``face`` under the given frame's vertex positions.

    Columns of the rotation are (normalized first edge, normal x edge,
    unit normal); the centroid is the vertex mean and the scale the mean
    of the three edge lengths.  Raises :class:`DegenerateFace` when the
    triangle area falls below ``DEGENERATE_AREA``.
    """
    i, j, k = (int(x) for x in face)
    pos = vertices.positions
    vi, vj, vk = pos[i], pos[j], pos[k]
    e_ij = vj - vi
    n_raw = np.cross(e_ij, vk - vi)
    n_len = float(np.linalg.norm(n_raw))
    if 0.5 * n_len <= DEGENERATE_AREA:
        raise DegenerateFace(f"face ({i}, {j}, {k}) has area <= {DEGENERATE_AREA}")
    t = (vi + vj + vk) / 3.0
    s = (
        float(np.linalg.norm(e_ij))
        + float(np.linalg.norm(vk - vj))
        + float(np.linalg.norm(vi - vk))
    ) / 3.0
    e = e_ij / np.linalg.norm(e_ij)
    n = n_raw / n_len
    r = np.column_stack([e, np.cross(n, e), n])
    return FaceFrame(r=r, t=t, s=s)


def face_frames_batch(corner_positions: np.ndarray):
    """Vectorized :func:`face_frame` over an (N, 3, 3) corner-position array
    (rows of the middle axis are the three corners).

    Returns ``(r, t, s)`` with shapes (N, 3, 3), (N, 3), (N,).  Degenerate
    triangles raise, matching the scalar path.
    """
    vi = corner_positions[:, 0]
    vj = corner_positions[:, 1]
    vk = corner_positions[:, 2]
    e_ij = vj - vi
    n_raw = np.cross(e_ij, vk - vi)
    n_len = np.linalg.norm(n_raw, axis=1)
    if np.any(0.5 * n_len <= DEGENERATE_AREA):
        bad = int(np.argmax(0.5 * n_len <= DEGENERATE_AREA))
        raise DegenerateFace(f"degenerate triangle at batch row {bad}")
    t = (vi + vj + vk) / 3.0
    s = (
        np.linalg.norm(e_ij, axis=1)
        + np.linalg.norm(vk - vj, axis=1)
        + np.linalg.norm(vi - vk, axis=1)
    ) / 3.0
    e = e_ij / np.linalg.norm(e_ij, axis=1)[:, None]
    n = n_raw / n_len[:, None]
    r = np.stack([e, np.cross(n, e), n], axis=2)
    return r, t, s


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Projection convention: a world point ``p`` maps to camera space via the
    4x4 transform, then to pixels as ``(fx * x / z + cx, fy * y / z + cy)``
    with depth ``z`` increasing away from the camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise MeshError("focal lengths must be positive")
        w2c = np.ascontiguousarray(np.asarray(self.world_to_camera, dtype=np.float64))
        if w2c.shape != (4, 4):
            raise MeshError(f"world_to_camera must be 4x4, got {w2c.shape}")
        rot = w2c[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=ORTHONORMAL_TOL):
            raise MeshError("world_to_camera rotation block is not orthonormal")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_camera": [float(x) for x in self.world_to_camera.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        required = {"fx", "fy", "cx", "cy", "width", "height", "world_to_camera"}
        missing = required - set(data)
        if missing:
            raise ParseError(f"camera JSON missing keys: {sorted(missing)}")
        w2c = np.asarray(data["world_to_camera"], dtype=np.float64)
        if w2c.size != 16:
            raise ParseError("world_to_camera must have 16 elements")
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
            world_to_camera=w2c.reshape(4, 4),
        )


def load_mesh(path) -> tuple[TemplateMesh, FrameVertices]:
    """Parse the OBJ subset: ``v`` and triangular ``f`` records.

    Unknown directives are ignored; malformed vertex/face lines raise
    :class:`ParseError` with the 1-based line number, and any face with a
    vertex count other than three raises :class:`NonTriangleFace`.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "v":
                if len(tokens) != 4:
                    raise ParseError("vertex line must be 'v x y z'", lineno)
                try:
                    vertices.append([float(t) for t in tokens[1:]])
                except ValueError:
                    raise ParseError("non-numeric vertex coordinate", lineno) from None
            elif tag == "f":
                refs = tokens[1:]
                if len(refs) != 3:
                    raise NonTriangleFace(
                        f"face has {len(refs)} vertices, only triangles supported", lineno
                    )
                indices = []
                for ref in refs:
                    # tolerate v/vt/vn forms by using the vertex index
                    head = ref.split("/")[0]
                    try:
                        idx = int(head)
                    except ValueError:
                        raise ParseError(f"bad face index {ref!r}", lineno) from None
                    if idx < 1:
                        raise ParseError(f"face index {idx} must be >= 1", lineno)
                    indices.append(idx - 1)
                faces.append(indices)
            # other directives (vn, vt, o, g, s, usemtl, ...) are ignored
    if not vertices:
        raise ParseError("no vertices found", None)
    positions = np.asarray(vertices, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if face_arr.size and face_arr.max() >= len(positions):
        raise ParseError(
            f"face references vertex {int(face_arr.max()) + 1} but only "
            f"{len(positions)} vertices are defined"
        )
    mesh = TemplateMesh(vertex_count=len(positions), faces=face_arr)
    return mesh, FrameVertices(positions=positions)


def save_mesh(path, mesh: TemplateMesh, vertices: FrameVertices) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in vertices.positions:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_frames(path, vertex_count: int) -> list[FrameVertices]:
    """JSON array of frames, each a flat list of 3 * vertex_count numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise ParseError("frames file must be a non-empty JSON array")
    frames = []
    for idx, flat in enumerate(data):
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != 3 * vertex_count:
            raise ParseError(
                f"frame {idx} has {arr.size} values, expected {3 * vertex_count}"
            )
        frames.append(FrameVertices(positions=arr.reshape(-1, 3)))
    return frames


def save_frames(path, frames) -> None:
    data = [[float(x) for x in f.positions.reshape(-1)] for f in frames]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)


def load_cameras(path) -> list[Camera]:
    """Camera JSON file: a single camera object or an array of them."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list) or not data:
        raise ParseError("camera file must hold an object or non-empty array")
    return [Camera.from_dict(d) for d in data]


def save_cameras(path, cameras) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=2)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM (P6, 8-bit)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MeshError(f"image must be (H, W, 3), got {img.shape}")
    quantized = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, 8-bit) into an (H, W, 3) float image in [0, 1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed between fields
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ParseError(f"not a P6 PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParseError(f"only 8-bit PPM supported, maxval={maxval}")
    expected = w * h * 3
    pixels = data[pos : pos + expected]
    if len(pixels) != expected:
        raise ParseError("truncated PPM pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0
