import json
import math

import numpy as np
import pytest

from sixdgs.camera import look_at, orbit_cameras
from sixdgs.gaussians import Scene
from sixdgs.scene_io import (
    CameraFileError, ImageFileError, SceneFileError, camera_from_c2w, camera_to_c2w,
    export_slice, load_cameras, load_scene, read_gs_ply, read_image, save_cameras,
    save_scene, write_image,
)
from sixdgs.slicing import slice_scene
from sixdgs.synth import random_gaussians


def _float32_scene(rng, n):
    s = random_gaussians(rng, n)
    return Scene.unpack(s.pack().astype(np.float32).astype(np.float64), s.background, s.bbox)


class TestSceneFile:
    def test_roundtrip_bitwise(self, rng, tmp_path):
        s = _float32_scene(rng, 100)
        save_scene(tmp_path / "s.ply", s)
        back = load_scene(tmp_path / "s.ply")
        assert back.pack().tobytes() == s.pack().tobytes()
        np.testing.assert_array_equal(back.bbox, s.bbox)
        np.testing.assert_array_equal(back.background, s.background)

    def test_file_bytes_are_float32_records(self, rng, tmp_path):
        s = _float32_scene(rng, 3)
        save_scene(tmp_path / "s.ply", s)
        raw = (tmp_path / "s.ply").read_bytes()
        body = raw[raw.index(b"end_header\n") + len(b"end_header\n"):]
        assert body == s.pack().astype("<f4").tobytes()

    def test_empty_roundtrip(self, tmp_path):
        save_scene(tmp_path / "e.ply", Scene())
        assert len(load_scene(tmp_path / "e.ply")) == 0

    def test_truncated(self, rng, tmp_path):
        save_scene(tmp_path / "s.ply", _float32_scene(rng, 10))
        raw = (tmp_path / "s.ply").read_bytes()
        (tmp_path / "t.ply").write_bytes(raw[:-7])
        with pytest.raises(SceneFileError, match="count mismatch"):
            load_scene(tmp_path / "t.ply")

    def test_trailing_bytes(self, rng, tmp_path):
        save_scene(tmp_path / "s.ply", _float32_scene(rng, 2))
        (tmp_path / "t.ply").write_bytes((tmp_path / "s.ply").read_bytes() + b"\0" * 4)
        with pytest.raises(SceneFileError, match="count mismatch"):
            load_scene(tmp_path / "t.ply")

    def test_unknown_version(self, rng, tmp_path):
        save_scene(tmp_path / "s.ply", _float32_scene(rng, 2))
        raw = (tmp_path / "s.ply").read_bytes().replace(b"sixdgs-scene 1", b"sixdgs-scene 2")
        (tmp_path / "v.ply").write_bytes(raw)
        with pytest.raises(SceneFileError, match="version"):
            load_scene(tmp_path / "v.ply")

    @pytest.mark.parametrize("content", [b"", b"not a ply at all", b"ply\nformat binary_little_endian 1.0\n"])
    def test_malformed(self, tmp_path, content):
        (tmp_path / "m.ply").write_bytes(content)
        with pytest.raises(SceneFileError):
            load_scene(tmp_path / "m.ply")

    def test_invalid_content_rejected(self, rng, tmp_path):
        s = _float32_scene(rng, 3)
        s.raw_alpha[1] = np.nan
        save_scene(tmp_path / "n.ply", s)
        with pytest.raises(SceneFileError, match="non-finite"):
            load_scene(tmp_path / "n.ply")

    def test_missing_file(self, tmp_path):
        with pytest.raises(SceneFileError):
            load_scene(tmp_path / "nope.ply")

    def test_atomic_write_leaves_no_temp(self, rng, tmp_path):
        save_scene(tmp_path / "s.ply", _float32_scene(rng, 2))
        assert [p.name for p in tmp_path.iterdir()] == ["s.ply"]


class TestCameras:
    def test_identity_transform_focal(self, tmp_path):
        doc = {"camera_angle_x": math.pi / 2, "w": 64, "h": 32,
               "frames": [{"file_path": "r_0", "transform_matrix": np.eye(4).tolist()}]}
        (tmp_path / "t.json").write_text(json.dumps(doc))
        cams, paths = load_cameras(tmp_path / "t.json")
        assert cams[0].focal == pytest.approx(32.0)
        # OpenGL looks down -z; the OpenCV camera must too
        np.testing.assert_allclose(cams[0].world_to_camera([0, 0, -1.0]), [0, 0, 1.0], atol=1e-15)
        assert paths[0].name == "r_0.png"

    def test_roundtrip(self, tmp_path):
        cams = orbit_cameras(5, 3.0, fov_x=0.7, width=20, height=10, seed=1)
        save_cameras(tmp_path / "t.json", cams)
        back, _ = load_cameras(tmp_path / "t.json")
        for a, b in zip(cams, back):
            np.testing.assert_allclose(b.rotation, a.rotation, atol=1e-14)
            np.testing.assert_allclose(b.center, a.center, atol=1e-14)
            assert (b.width, b.height, b.fov_x) == (20, 10, 0.7)

    def test_c2w_inverse(self):
        cam = look_at([1.0, 2.0, 3.0], fov_x=0.9, width=8, height=8)
        again = camera_from_c2w(camera_to_c2w(cam), cam.fov_x, 8, 8)
        np.testing.assert_allclose(again.translation, cam.translation, atol=1e-14)

    def test_non_orthonormal_rejected(self, tmp_path):
        m = np.eye(4)
        m[0, 0] = 1.01
        doc = {"camera_angle_x": 1.0, "w": 8, "h": 8, "frames": [{"file_path": "a", "transform_matrix": m.tolist()}]}
        (tmp_path / "t.json").write_text(json.dumps(doc))
        with pytest.raises(CameraFileError, match="rigid"):
            load_cameras(tmp_path / "t.json")

    def test_small_drift_accepted(self):
        m = np.eye(4)
        m[0, 0] = 1 + 2e-5
        cam = camera_from_c2w(m, 1.0, 8, 8)
        assert np.linalg.det(cam.rotation) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("doc", ["{", "[]", '{"frames": []}'])
    def test_bad_documents(self, tmp_path, doc):
        (tmp_path / "t.json").write_text(doc)
        with pytest.raises(CameraFileError):
            load_cameras(tmp_path / "t.json")

    def test_size_from_image(self, tmp_path):
        write_image(tmp_path / "r_0.png", np.zeros((6, 9, 3)))
        doc = {"camera_angle_x": 1.0, "frames": [{"file_path": "r_0", "transform_matrix": np.eye(4).tolist()}]}
        (tmp_path / "t.json").write_text(json.dumps(doc))
        cams, _ = load_cameras(tmp_path / "t.json")
        assert (cams[0].width, cams[0].height) == (9, 6)


class TestImages:
    def test_roundtrip_after_quantization(self, rng, tmp_path):
        img = np.round(rng.uniform(size=(7, 11, 3)) * 255) / 255
        write_image(tmp_path / "a.png", img)
        assert np.abs(read_image(tmp_path / "a.png") - img).max() == 0.0

    def test_rgba_composited(self, tmp_path):
        rgba = np.zeros((2, 2, 4))
        rgba[..., 0] = 1.0
        rgba[..., 3] = 0.0
        rgba[0, 0, 3] = 1.0
        write_image(tmp_path / "a.png", rgba)
        img = read_image(tmp_path / "a.png", background=(0.0, 0.0, 1.0))
        np.testing.assert_allclose(img[0, 0], [1, 0, 0])
        np.testing.assert_allclose(img[1, 1], [0, 0, 1])

    def test_decode_failure(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"garbage")
        with pytest.raises(ImageFileError):
            read_image(tmp_path / "x.png")


class TestSliceExport:
    def test_zero_cross_covariance_keeps_positions(self, rng, tmp_path):
        s = random_gaussians(rng, 20, strength=0.0)
        sl = slice_scene(s, np.array([0.0, 0.0, 1.0]), want_scale_rotation=True)
        export_slice(tmp_path / "g.ply", sl.cg)
        cols = read_gs_ply(tmp_path / "g.ply")
        xyz = np.stack([cols["x"], cols["y"], cols["z"]], 1)
        np.testing.assert_array_equal(xyz, s.mu_p.astype(np.float32))
        assert {"f_dc_0", "f_rest_44", "opacity", "scale_2", "rot_3"} <= set(cols)

    def test_quaternion_reconstructs_covariance(self, rng, tmp_path):
        s = random_gaussians(rng, 10)
        sl = slice_scene(s, np.array([0.6, 0.0, 0.8]), want_scale_rotation=True)
        export_slice(tmp_path / "g.ply", sl.cg)
        c = read_gs_ply(tmp_path / "g.ply")
        w, x, y, z = (c[f"rot_{i}"] for i in range(4))
        R = np.stack([
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ], -2)
        S = np.exp(np.stack([c["scale_0"], c["scale_1"], c["scale_2"]], 1))
        sig = R @ (S[:, :, None] ** 2 * np.swapaxes(R, 1, 2))
        np.testing.assert_allclose(sig, sl.cg.sigma_cond, rtol=1e-5, atol=1e-7)
        alpha = 1 / (1 + np.exp(-c["opacity"]))
        np.testing.assert_allclose(alpha, sl.cg.alpha_cond, rtol=1e-5)
