import numpy as np
import pytest

from sixdgs.camera import Camera, look_at
from sixdgs.raster import (
    ALPHA_MAX, Splat2D, composite_reference, project, project_gaussian, rasterize,
    rasterize_reference, rasterize_splats,
)
from sixdgs.slicing import ConditionalGaussian3D, slice_scene, view_directions
from sixdgs.synth import random_gaussians


def _splats(mean, cov, depth, alpha, color):
    cov = np.asarray(cov, float)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], 1)
    return Splat2D(np.asarray(mean, float), cov, np.asarray(depth, float),
                   np.asarray(alpha, float), np.asarray(color, float)), conic


def _both(splats, conic, w, h, bg):
    tile, _ = rasterize_splats(splats, conic, w, h, bg)
    ref = composite_reference(splats, conic, w, h, bg)
    return tile, ref


class TestCompositing:
    def test_empty_gives_background(self):
        s, c = _splats(np.zeros((0, 2)), np.zeros((0, 2, 2)), [], [], np.zeros((0, 3)))
        tile, ref = _both(s, c, 20, 10, [0.1, 0.2, 0.3])
        np.testing.assert_array_equal(tile, np.broadcast_to([0.1, 0.2, 0.3], (10, 20, 3)))
        np.testing.assert_array_equal(ref, tile)

    def test_single_splat_center_pixel(self):
        # pixel (8, 8) samples at (8.5, 8.5), exactly the splat mean
        s, c = _splats([[8.5, 8.5]], [np.eye(2) * 4.0], [1.0], [0.6], [[1.0, 0.5, 0.0]])
        bg = np.array([0.0, 0.0, 1.0])
        tile, ref = _both(s, c, 17, 17, bg)
        expect = 0.6 * np.array([1.0, 0.5, 0.0]) + 0.4 * bg
        np.testing.assert_allclose(tile[8, 8], expect, atol=1e-15)
        # one pixel right: power = -0.5 * 1 / 4
        a = 0.6 * np.exp(-0.125)
        np.testing.assert_allclose(tile[8, 9], a * np.array([1.0, 0.5, 0.0]) + (1 - a) * bg, atol=1e-15)
        np.testing.assert_allclose(ref, tile, atol=1e-15)

    def test_front_to_back_order(self):
        cov = [np.eye(2) * 50.0] * 2
        s, c = _splats([[8, 8], [8, 8]], cov, [2.0, 1.0], [0.5, 0.5], [[1, 0, 0], [0, 1, 0]])
        tile, ref = _both(s, c, 16, 16, np.zeros(3))
        px = tile[7, 7]
        assert px[1] > px[0]  # green splat is nearer
        np.testing.assert_allclose(ref, tile, atol=1e-15)

    def test_opacity_clamp(self):
        s, c = _splats([[4.5, 4.5]], [np.eye(2)], [1.0], [1.0], [[1, 1, 1]])
        tile, _ = _both(s, c, 9, 9, np.zeros(3))
        np.testing.assert_allclose(tile[4, 4], ALPHA_MAX)

    def test_early_termination_excludes_saturating_splat(self):
        # two 0.99 splats leave T = 1e-4; a third would push below and is skipped
        n = 3
        s, c = _splats(np.full((n, 2), 4.5), [np.eye(2)] * n, [1.0, 2.0, 3.0], [0.99] * n,
                       [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        tile, ref = _both(s, c, 9, 9, np.zeros(3))
        np.testing.assert_allclose(ref, tile, atol=1e-15)
        px = tile[4, 4]
        assert px[2] < 1e-3

    def test_faint_splats_are_skipped(self):
        s, c = _splats([[4.5, 4.5]], [np.eye(2)], [1.0], [0.5 / 255], [[1, 1, 1]])
        tile, ref = _both(s, c, 9, 9, np.zeros(3))
        assert np.all(tile == 0) and np.all(ref == 0)


class TestTileEquivalence:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("size", [(64, 64), (37, 23)])
    def test_matches_reference(self, seed, size):
        rng = np.random.default_rng(seed)
        scene = random_gaussians(rng, 150, pos_scale=(0.02, 0.3))
        w, h = size
        cam = look_at(rng.normal(size=3) * 0.3 + [2.5, 0, 0.5], fov_x=0.9, width=w, height=h)
        cg = slice_scene(scene, view_directions(scene.mu_p, cam.center)).cg
        bg = rng.uniform(size=3)
        tile = rasterize(cg, cam, bg).rgb
        ref = rasterize_reference(cg, cam, bg).rgb
        assert np.abs(tile - ref).max() <= 1e-12

    def test_deterministic(self, small_scene, camera):
        cg = slice_scene(small_scene, view_directions(small_scene.mu_p, camera.center)).cg
        a = rasterize(cg, camera, np.zeros(3)).rgb
        b = rasterize(cg, camera, np.zeros(3)).rgb
        assert np.array_equal(a, b)


class TestProjection:
    def _cg(self, mu, sig=None):
        return ConditionalGaussian3D(np.asarray(mu, float), np.eye(3) * 0.01 if sig is None else sig,
                                     0.5, np.array([0.5, 0.5, 0.5]))

    def test_center_projects_to_principal_point(self):
        cam = Camera(1.0, 32, 24)
        s = project_gaussian(self._cg([0, 0, 2.0]), cam)
        np.testing.assert_allclose(s.mean2d, [16.0, 12.0])
        assert s.depth == 2.0

    def test_behind_camera_is_culled(self):
        cam = Camera(1.0, 32, 24)
        assert project_gaussian(self._cg([0, 0, -1.0]), cam) is None
        assert project_gaussian(self._cg([0, 0, 0.001]), cam) is None

    def test_far_outside_image_is_culled(self):
        cam = Camera(1.0, 32, 24)
        assert project_gaussian(self._cg([50.0, 0, 2.0]), cam) is None

    def test_ewa_covariance(self):
        cam = Camera(1.0, 32, 24)
        sig = np.diag([0.04, 0.01, 0.09])
        s = project_gaussian(self._cg([0, 0, 2.0], sig), cam)
        f = cam.focal
        # at the optical axis J = diag(f/z, f/z) on x, y
        expect = np.diag([0.04, 0.01]) * (f / 2.0) ** 2 + 0.3 * np.eye(2)
        np.testing.assert_allclose(s.cov2d, expect, rtol=1e-12)

    def test_batch_index_tracks_survivors(self):
        cam = Camera(1.0, 32, 24)
        cg = ConditionalGaussian3D(np.array([[0, 0, 2.0], [0, 0, -2.0], [0.1, 0, 3.0]]),
                                   np.broadcast_to(np.eye(3) * 0.01, (3, 3, 3)),
                                   np.full(3, 0.5), np.full((3, 3), 0.5))
        proj = project(cg, cam)
        np.testing.assert_array_equal(proj.index, [0, 2])
