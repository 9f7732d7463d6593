"""Synthetic view-dependent scenes with exact ground truth.

Targets are rendered with the reference compositor, so a perfect fit is
reachable by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, orbit_cameras
from .gaussians import N_SH, TRIL_COLS, TRIL_ROWS, Scene, logit, raw_lambda_for
from .sh import BAND, rgb_to_dc
from .slicing import SliceOptions


@dataclass
class SynthSpec:
    seed: int = 0
    k: int = 10
    n_train: int = 32
    n_test: int = 8
    image_size: int = 64
    strength: float = 1.0
    radius: float = 3.0
    fov_x: float = 0.7
    background: tuple = (0.0, 0.0, 0.0)
    lambda_opa: float = 0.35

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need at least one training view")
        if self.strength < 0:
            raise ValueError("strength must be >= 0")


@dataclass
class SyntheticDataset:
    scene: Scene
    train_cameras: list[Camera]
    test_cameras: list[Camera]
    train_images: list[np.ndarray]
    test_images: list[np.ndarray]
    spec: SynthSpec = field(default_factory=SynthSpec)


def _random_offdiag(rng, n, spatial_scale, cross_scale, angular_scale):
    """Raw off-diagonal entries: rows 1..5 of the strict lower triangle."""
    raw = np.zeros((n, 15))
    for j, (r, c) in enumerate(zip(TRIL_ROWS, TRIL_COLS)):
        if r < 3:
            s = spatial_scale
        elif c < 3:
            s = cross_scale
        else:
            s = angular_scale
        raw[:, j] = rng.normal(0.0, s, n) if s > 0 else 0.0
    return raw


def random_gaussians(rng, n: int, *, extent: float = 0.5, strength: float = 1.0,
                     pos_scale=(0.05, 0.2), alpha_range=(0.5, 0.95),
                     lambda_opa: float = 0.35, background=(0.0, 0.0, 0.0)) -> Scene:
    """``n`` random valid Gaussians with positions in ``[-extent, extent]^3``.

    ``strength`` scales the position/direction coupling, the spread of the
    direction means and the higher SH bands; 0 gives a view-independent scene.
    """
    mu_p = rng.uniform(-extent, extent, (n, 3))
    dirs = rng.normal(size=(n, 3))
    mu_d = strength * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    raw_diag = np.concatenate([
        np.log(rng.uniform(*pos_scale, (n, 3))),
        rng.normal(0.0, 0.15, (n, 3)),
    ], axis=1)
    raw_off = _random_offdiag(rng, n, 0.4, 0.6 * strength, 0.2)
    raw_alpha = logit(rng.uniform(*alpha_range, n))
    sh = np.zeros((n, 3, N_SH))
    sh[:, :, 0] = rgb_to_dc(rng.uniform(0.1, 0.9, (n, 3)))
    higher = BAND > 0
    sh[:, :, higher] = strength * rng.normal(0.0, 0.5, (n, 3, int(higher.sum()))) / BAND[higher]
    raw_lambda = np.full(n, raw_lambda_for(lambda_opa))
    bbox = np.array([[-extent] * 3, [extent] * 3], dtype=float)
    return Scene(mu_p, mu_d, np.concatenate([raw_diag, raw_off], 1), raw_alpha, sh,
                 raw_lambda, np.asarray(background, float), bbox)


def generate_synthetic(spec: SynthSpec | None = None) -> SyntheticDataset:
    spec = spec or SynthSpec()
    spec.validate()
    from .render import render_view

    rng = np.random.default_rng(spec.seed)
    scene = random_gaussians(rng, spec.k, strength=spec.strength, lambda_opa=spec.lambda_opa,
                             background=spec.background)
    n_total = spec.n_train + spec.n_test
    cams = orbit_cameras(n_total, spec.radius, fov_x=spec.fov_x, width=spec.image_size,
                         height=spec.image_size, seed=spec.seed + 1)
    test_ids = set(np.linspace(0, n_total - 1, spec.n_test).round().astype(int)) if spec.n_test else set()
    train_cams = [c for i, c in enumerate(cams) if i not in test_ids]
    test_cams = [c for i, c in enumerate(cams) if i in test_ids]
    options = SliceOptions(lambda_opa=spec.lambda_opa)

    def shoot(cam):
        return render_view(scene, cam, options, renderer="reference").rgb

    return SyntheticDataset(scene, train_cams, test_cams,
                            [shoot(c) for c in train_cams], [shoot(c) for c in test_cams], spec)


def scene_extent(cameras) -> float:
    """Camera-spread radius used to scale densification thresholds (x1.1)."""
    centers = np.stack([c.center for c in cameras])
    mid = centers.mean(0)
    return 1.1 * float(np.linalg.norm(centers - mid, axis=1).max())


def random_cube_init(rng, n: int, bbox, lambda_opa: float = 0.35, init_alpha: float = 0.1,
                     background=(0.0, 0.0, 0.0)) -> Scene:
    """Random point cloud inside ``bbox`` with nearest-neighbour isotropic scales."""
    from scipy.spatial import cKDTree

    bbox = np.asarray(bbox, dtype=float)
    lo, hi = bbox
    mu_p = rng.uniform(lo, hi, (n, 3))
    if n > 3:
        dist, _ = cKDTree(mu_p).query(mu_p, k=4)
        scale = np.sqrt(np.maximum(np.mean(dist[:, 1:] ** 2, axis=1), 1e-7))
    else:
        scale = np.full(n, 0.1 * float(np.max(hi - lo)))
    raw_diag = np.zeros((n, 6))
    raw_diag[:, :3] = np.log(scale)[:, None]
    sh = np.zeros((n, 3, N_SH))
    sh[:, :, 0] = rgb_to_dc(rng.uniform(0.05, 0.95, (n, 3)))
    return Scene(mu_p, np.zeros((n, 3)), np.concatenate([raw_diag, np.zeros((n, 15))], 1),
                 np.full(n, float(logit(init_alpha))), sh,
                 np.full(n, raw_lambda_for(lambda_opa)), np.asarray(background, float), bbox)
