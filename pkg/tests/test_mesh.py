import math

import numpy as np
import pytest

from oracles import edge_length_mean, random_rigid_transform
from splatstream.mesh import (
    Camera,
    DegenerateFace,
    FrameVertices,
    MeshError,
    NonTriangleFace,
    ParseError,
    TemplateMesh,
    face_frame,
    face_frames_batch,
    load_cameras,
    load_frames,
    load_mesh,
    read_ppm,
    save_cameras,
    save_frames,
    save_mesh,
    write_ppm,
)


class TestTemplateMesh:
    def test_valid(self):
        mesh = TemplateMesh(vertex_count=4, faces=np.array([[0, 1, 2], [1, 2, 3]]))
        assert mesh.face_count == 2

    def test_index_out_of_range(self):
        with pytest.raises(MeshError):
            TemplateMesh(vertex_count=3, faces=np.array([[0, 1, 3]]))

    def test_repeated_index(self):
        with pytest.raises(MeshError):
            TemplateMesh(vertex_count=3, faces=np.array([[0, 1, 1]]))

    def test_topology_immutable(self):
        mesh = TemplateMesh(vertex_count=3, faces=np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            mesh.faces[0, 0] = 2


class TestFrameVertices:
    def test_nonfinite_rejected(self):
        with pytest.raises(MeshError):
            FrameVertices(positions=np.array([[0.0, 0.0, np.nan]]))

    def test_shape_rejected(self):
        with pytest.raises(MeshError):
            FrameVertices(positions=np.zeros((3, 2)))


class TestFaceFrame:
    def test_axis_aligned_triangle(self, unit_triangle):
        _, verts = unit_triangle
        frame = face_frame(verts, (0, 1, 2))
        np.testing.assert_allclose(frame.t, [1 / 3, 1 / 3, 0.0], atol=1e-15)
        assert frame.s == pytest.approx((2.0 + math.sqrt(2.0)) / 3.0)
        np.testing.assert_allclose(frame.r, np.eye(3), atol=1e-15)

    def test_mean_edge_length_oracle(self):
        v = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 2.0, 0.0]])
        frame = face_frame(FrameVertices(positions=v), (0, 1, 2))
        assert frame.s == pytest.approx(edge_length_mean(*v), abs=1e-12)

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            v = rng.normal(size=(3, 3))
            try:
                frame = face_frame(FrameVertices(positions=v), (0, 1, 2))
            except DegenerateFace:
                continue
            rot, shift = random_rigid_transform(rng)
            moved = face_frame(FrameVertices(positions=v @ rot.T + shift), (0, 1, 2))
            np.testing.assert_allclose(moved.t, rot @ frame.t + shift, atol=1e-9)
            np.testing.assert_allclose(moved.r, rot @ frame.r, atol=1e-9)
            assert moved.s == pytest.approx(frame.s, abs=1e-9)

    def test_uniform_scaling(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            v = rng.normal(size=(3, 3))
            lam = rng.uniform(0.1, 5.0)
            frame = face_frame(FrameVertices(positions=v), (0, 1, 2))
            scaled = face_frame(FrameVertices(positions=lam * v), (0, 1, 2))
            assert scaled.s == pytest.approx(lam * frame.s, rel=1e-9)
            np.testing.assert_allclose(scaled.t, lam * frame.t, atol=1e-9)
            np.testing.assert_allclose(scaled.r, frame.r, atol=1e-9)

    def test_rotation_properties(self):
        rng = np.random.default_rng(9)
        count = 0
        while count < 1000:
            v = rng.normal(size=(3, 3))
            try:
                frame = face_frame(FrameVertices(positions=v), (0, 1, 2))
            except DegenerateFace:
                continue
            count += 1
            np.testing.assert_allclose(frame.r.T @ frame.r, np.eye(3), atol=1e-6)
            assert np.linalg.det(frame.r) == pytest.approx(1.0, abs=1e-6)
            # third column is the unit normal
            n = np.cross(v[1] - v[0], v[2] - v[0])
            n /= np.linalg.norm(n)
            np.testing.assert_allclose(frame.r[:, 2], n, atol=1e-6)

    def test_degenerate_raises(self):
        v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        with pytest.raises(DegenerateFace):
            face_frame(FrameVertices(positions=v), (0, 1, 2))

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(10)
        corners = rng.normal(size=(50, 3, 3))
        r, t, s = face_frames_batch(corners)
        for i in range(50):
            frame = face_frame(FrameVertices(positions=corners[i]), (0, 1, 2))
            np.testing.assert_allclose(r[i], frame.r, atol=1e-12)
            np.testing.assert_allclose(t[i], frame.t, atol=1e-12)
            assert s[i] == pytest.approx(frame.s, abs=1e-12)


class TestObjIO:
    def test_single_triangle(self, tmp_path):
        path = tmp_path / "tri.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        mesh, verts = load_mesh(path)
        assert mesh.vertex_count == 3
        assert mesh.face_count == 1
        np.testing.assert_allclose(verts.positions[1], [1, 0, 0])

    def test_quad_rejected(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(NonTriangleFace) as exc:
            load_mesh(path)
        assert exc.value.line == 5

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0\n")
        with pytest.raises(ParseError) as exc:
            load_mesh(path)
        assert exc.value.line == 2

    def test_icosphere_face_count(self, tmp_path):
        from splatstream.demo import icosphere

        mesh, verts = icosphere(1)
        path = tmp_path / "ico.obj"
        save_mesh(path, mesh, verts)
        # text-processing oracle: count the f records directly
        face_lines = [
            ln for ln in path.read_text().splitlines() if ln.startswith("f ")
        ]
        assert len(face_lines) == 80
        reloaded, _ = load_mesh(path)
        assert reloaded.face_count == 80

    def test_roundtrip(self, tmp_path, unit_triangle):
        mesh, verts = unit_triangle
        path = tmp_path / "tri.obj"
        save_mesh(path, mesh, verts)
        mesh2, verts2 = load_mesh(path)
        np.testing.assert_array_equal(mesh2.faces, mesh.faces)
        np.testing.assert_allclose(verts2.positions, verts.positions)


class TestFramesIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = [FrameVertices(positions=rng.normal(size=(5, 3))) for _ in range(3)]
        path = tmp_path / "frames.json"
        save_frames(path, frames)
        loaded = load_frames(path, 5)
        assert len(loaded) == 3
        for a, b in zip(frames, loaded):
            np.testing.assert_allclose(a.positions, b.positions)

    def test_wrong_length(self, tmp_path):
        path = tmp_path / "frames.json"
        path.write_text("[[0, 0, 0]]")
        with pytest.raises(ParseError):
            load_frames(path, 5)


class TestCameraIO:
    def test_roundtrip(self, tmp_path):
        cam = Camera(
            fx=100.0, fy=110.0, cx=32.0, cy=30.0, width=64, height=60,
            world_to_camera=np.eye(4),
        )
        path = tmp_path / "cams.json"
        save_cameras(path, [cam, cam])
        loaded = load_cameras(path)
        assert len(loaded) == 2
        assert loaded[0].fx == cam.fx
        np.testing.assert_allclose(loaded[0].world_to_camera, np.eye(4))

    def test_single_object(self, tmp_path):
        cam = Camera(fx=10, fy=10, cx=2, cy=2, width=4, height=4, world_to_camera=np.eye(4))
        path = tmp_path / "cam.json"
        import json

        path.write_text(json.dumps(cam.to_dict()))
        assert len(load_cameras(path)) == 1

    def test_missing_key(self, tmp_path):
        path = tmp_path / "cam.json"
        path.write_text('{"fx": 1.0}')
        with pytest.raises(ParseError):
            load_cameras(path)

    def test_bad_rotation(self):
        w2c = np.eye(4)
        w2c[0, 1] = 0.5
        with pytest.raises(MeshError):
            Camera(fx=1, fy=1, cx=0, cy=0, width=2, height=2, world_to_camera=w2c)


class TestPpm:
    def test_roundtrip_exact_at_8bit(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(6, 5, 3)).astype(np.float64) / 255.0
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        np.testing.assert_allclose(back, img, atol=1e-12)

    def test_clamps(self, tmp_path):
        img = np.full((2, 2, 3), 1.7)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        assert read_ppm(path).max() == 1.0

    def test_header_comment(self, tmp_path):
        path = tmp_path / "img.ppm"
        pixels = bytes(range(12))
        path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + pixels)
        img = read_ppm(path)
        assert img.shape == (2, 2, 3)
        assert img[0, 0, 1] == pytest.approx(1 / 255)

    def test_truncated(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(ParseError):
            read_ppm(path)
