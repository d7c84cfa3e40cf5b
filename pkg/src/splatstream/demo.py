"""Self-contained synthetic scene: an icosphere template, a camera ring,
procedurally textured reference images, and a rigid animation.

The reference images come from a tiny analytic ray tracer (ray/sphere
intersection plus a spherical texture), so the targets are produced by an
entirely different rendering path than the splatting pipeline under test.
Scene randomness (texture phase and palette, camera ring roll) is driven
by a seed, which is what makes multi-seed experiments meaningful while
each individual run stays deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import (
    Camera,
    FrameVertices,
    TemplateMesh,
    save_cameras,
    save_frames,
    save_mesh,
    write_ppm,
)

SPHERE_RADIUS = 1.0


def icosphere(subdivisions: int = 1) -> tuple[TemplateMesh, FrameVertices]:
    """Unit icosphere: icosahedron faces split 4-ways per subdivision level
    (80 faces at one subdivision), vertices pushed onto the sphere."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) for v in verts]
    verts = [v / np.linalg.norm(v) for v in verts]

    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = (verts[i] + verts[j]) / 2.0
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(verts)
                verts.append(m)
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    positions = np.array(verts) * SPHERE_RADIUS
    mesh = TemplateMesh(vertex_count=len(positions), faces=np.array(faces))
    return mesh, FrameVertices(positions=positions)


def ring_cameras(
    count: int = 8,
    size: int = 128,
    distance: float = 3.2,
    roll: float = 0.0,
    fov_deg: float = 40.0,
) -> list[Camera]:
    """Cameras evenly spaced on a circle around the z axis, aimed at the
    origin; ``roll`` rotates the whole ring (seeded scene variation)."""
    cameras = []
    fx = size / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    up = np.array([0.0, 0.0, 1.0])
    for k in range(count):
        theta = roll + 2.0 * math.pi * k / count
        eye = distance * np.array([math.cos(theta), math.sin(theta), 0.25 * math.sin(2 * theta)])
        forward = -eye / np.linalg.norm(eye)
        right = np.cross(up, forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])  # rows: camera axes in world
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        cameras.append(
            Camera(
                fx=fx,
                fy=fx,
                cx=size / 2.0,
                cy=size / 2.0,
                width=size,
                height=size,
                world_to_camera=w2c,
            )
        )
    return cameras


# ----------------------------------------------------------------------
# procedural sphere textures


def checker_texture(seed: int = 0, squares: int = 6):
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    color_a = 0.15 + 0.7 * rng.random(3)
    color_b = 0.15 + 0.7 * rng.random(3)
    # keep the two tiles visually distinct
    if np.abs(color_a - color_b).sum() < 0.6:
        color_b = 1.0 - color_a

    def tex(points: np.ndarray) -> np.ndarray:
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        u = (np.arctan2(y, x) + phase) / (2.0 * math.pi)
        v = np.arccos(np.clip(z / np.linalg.norm(points, axis=1), -1.0, 1.0)) / math.pi
        parity = (np.floor(u * 2 * squares) + np.floor(v * squares)) % 2
        return np.where(parity[:, None] > 0.5, color_a[None, :], color_b[None, :])

    return tex


def bands_texture(seed: int = 0, bands: int = 5):
    rng = np.random.default_rng(seed)
    colors = 0.1 + 0.8 * rng.random((bands, 3))

    def tex(points: np.ndarray) -> np.ndarray:
        v = np.arccos(
            np.clip(points[:, 2] / np.linalg.norm(points, axis=1), -1.0, 1.0)
        ) / math.pi
        idx = np.minimum((v * bands).astype(int), bands - 1)
        return colors[idx]

    return tex


TEXTURES = {"checker": checker_texture, "bands": bands_texture}


def raytrace_sphere(
    cam: Camera,
    texture,
    radius: float = SPHERE_RADIUS,
    background=(0.0, 0.0, 0.0),
    supersample: int = 2,
) -> np.ndarray:
    """Analytic render of a textured origin-centered sphere.

    Independent of the splatting pipeline: pixel rays are intersected with
    the sphere and shaded by the texture at the hit point, supersampled to
    soften texture edges.
    """
    h, w = cam.height, cam.width
    ss = max(1, int(supersample))
    ys, xs = np.meshgrid(
        (np.arange(h * ss) + 0.5) / ss - 0.5,
        (np.arange(w * ss) + 0.5) / ss - 0.5,
        indexing="ij",
    )
    dirs_cam = np.stack(
        [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1
    )
    rot = cam.rotation
    eye = -rot.T @ cam.translation
    dirs = dirs_cam @ rot  # camera-space dirs to world (R^T d)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    # |eye + t d|^2 = r^2
    b = 2.0 * dirs @ eye
    c = float(eye @ eye) - radius * radius
    disc = b * b - 4.0 * c
    hit = disc >= 0.0
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / 2.0, np.inf)
    hit &= t > 0

    img = np.empty((h * ss, w * ss, 3))
    img[:] = np.asarray(background, dtype=np.float64)
    if hit.any():
        points = eye[None, :] + t[hit][:, None] * dirs[hit]
        img[hit] = texture(points)
    if ss > 1:
        img = img.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    return img


def rigid_frames(base: FrameVertices, count: int = 3, seed: int = 0) -> list[FrameVertices]:
    """Base frame plus rigidly transformed copies (rotation about a seeded
    axis with a small translation)."""
    rng = np.random.default_rng(seed + 1000)
    frames = [base]
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    for k in range(1, count):
        angle = 0.35 * k
        kx, ky, kz = axis
        kmat = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
        rot = np.eye(3) + math.sin(angle) * kmat + (1 - math.cos(angle)) * (kmat @ kmat)
        shift = 0.1 * k * rng.normal(size=3)
        frames.append(FrameVertices(positions=base.positions @ rot.T + shift))
    return frames


@dataclass
class DemoScene:
    mesh: TemplateMesh
    frames: list[FrameVertices]
    cameras: list[Camera]
    references: list[np.ndarray]
    background: tuple


def make_scene(
    seed: int = 0,
    size: int = 128,
    num_cameras: int = 8,
    texture: str = "checker",
    subdivisions: int = 1,
    background=(0.0, 0.0, 0.0),
    frame_count: int = 3,
    **texture_kwargs,
) -> DemoScene:
    if texture not in TEXTURES:
        raise ValueError(f"unknown texture {texture!r}, have {sorted(TEXTURES)}")
    mesh, base = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    roll = rng.uniform(0.0, 2.0 * math.pi)
    cameras = ring_cameras(count=num_cameras, size=size, roll=roll)
    tex = TEXTURES[texture](seed=seed, **texture_kwargs)
    references = [raytrace_sphere(cam, tex, background=background) for cam in cameras]
    frames = rigid_frames(base, count=frame_count, seed=seed)
    return DemoScene(
        mesh=mesh,
        frames=frames,
        cameras=cameras,
        references=references,
        background=tuple(float(c) for c in background),
    )


def default_fit_config(seed: int = 0) -> dict:
    """Demo fit settings: plain GD with rates sized for mean-L1 gradients at
    this scene's scale, and a growth schedule that tops out well under the
    node budget."""
    return {
        "iterations": 300,
        "optimizer": "gd",
        "learning_rates": {
            "beta": 15.0,
            "delta_mu": 30.0,
            "delta_scale": 2e-2,
            "delta_rot": 1e-3,
            "color": 30.0,
            "opacity": 30.0,
        },
        "lambda_pos": 0.01,
        "lambda_scale": 1.0,
        "tau_pos": 1.0,
        "tau_scale": 0.6,
        "level_weights": None,
        "supervised_levels": "all",
        "growth": {
            "step_k": 15,
            "epsilon": 5e-5,
            "max_level": 3,
            "cap_schedule": 35,
            "initial_cap": 1,
        },
        "seed": seed,
        "background": [0.0, 0.0, 0.0],
        "threads": 1,
    }


def write_scene(out_dir, scene: DemoScene, seed: int = 0) -> dict:
    """Write mesh/frames/cameras/references/config files; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    refs_dir = out / "refs"
    refs_dir.mkdir(exist_ok=True)
    paths = {
        "mesh": str(out / "mesh.obj"),
        "frames": str(out / "frames.json"),
        "cameras": str(out / "cameras.json"),
        "references": str(refs_dir),
        "config": str(out / "config.json"),
    }
    save_mesh(paths["mesh"], scene.mesh, scene.frames[0])
    save_frames(paths["frames"], scene.frames)
    save_cameras(paths["cameras"], scene.cameras)
    for idx, ref in enumerate(scene.references):
        write_ppm(refs_dir / f"ref_{idx:02d}.ppm", ref)
    config = default_fit_config(seed)
    config["background"] = list(scene.background)
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
    return paths
