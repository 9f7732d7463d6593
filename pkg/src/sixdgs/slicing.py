"""Slice 6D Gaussians into view-conditioned 3D Gaussians.

For a view direction ``d`` the joint position/direction Gaussian is
conditioned on ``X_d = d``:

    mu_cond    = mu_p + S_pd S_d^-1 (d - mu_d)
    Sigma_cond = S_p - S_pd S_d^-1 S_pd^T
    alpha_cond = alpha * exp(-lambda_opa * (d - mu_d)^T S_d^-1 (d - mu_d))

``S_d`` is always inverted after adding ``1e-8 * trace(S_d) / 3`` to its
diagonal.  All functions accept a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import (
    NumericDegeneracyError,
    Scene,
    activate_cholesky,
    covariance,
    direction_means,
    sigmoid,
)
from .sh import eval_color

JITTER = 1e-8
EXP_FLOOR = -700.0

# debug counters, reset by tests
counters = {"inversions": 0, "negative_mahalanobis": 0}


@dataclass
class ConditionalGaussian3D:
    """A view-sliced splat (or a batch of them along a leading axis)."""

    mu_cond: np.ndarray
    sigma_cond: np.ndarray
    alpha_cond: np.ndarray
    color: np.ndarray
    scale: np.ndarray | None = None
    rotation: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.mu_cond) if np.ndim(self.mu_cond) == 2 else 1


@dataclass
class SliceOptions:
    """How raw parameters are interpreted when slicing.

    ``lambda_opa=None`` uses the per-Gaussian learnable value
    ``sigmoid(raw_lambda)``; a float overrides it for every Gaussian.
    """

    lambda_opa: float | None = 0.35
    normalize_mu_d: bool = False

    def lambdas(self, scene: Scene) -> np.ndarray:
        if self.lambda_opa is None:
            return sigmoid(scene.raw_lambda)
        return np.full(len(scene), float(self.lambda_opa))


def partition(sigma):
    """Split ``(..., 6, 6)`` into ``(Sigma_p, Sigma_pd, Sigma_d)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma[..., :3, :3], sigma[..., :3, 3:], sigma[..., 3:, 3:]


def jittered(sigma_d) -> np.ndarray:
    sigma_d = np.asarray(sigma_d, dtype=np.float64)
    eps = JITTER * np.trace(sigma_d, axis1=-2, axis2=-1) / 3.0
    return sigma_d + eps[..., None, None] * np.eye(3)


def inv_spd3(a) -> np.ndarray:
    """Invert symmetric positive definite 3x3 matrices via closed-form Cholesky."""
    a = np.asarray(a, dtype=np.float64)
    batch = a.reshape(-1, 3, 3)
    counters["inversions"] += len(batch)
    with np.errstate(invalid="ignore", divide="ignore"):
        l00 = np.sqrt(batch[:, 0, 0])
        l10 = batch[:, 1, 0] / l00
        l20 = batch[:, 2, 0] / l00
        l11 = np.sqrt(batch[:, 1, 1] - l10 * l10)
        l21 = (batch[:, 2, 1] - l20 * l10) / l11
        l22 = np.sqrt(batch[:, 2, 2] - l20 * l20 - l21 * l21)
        m00, m11, m22 = 1.0 / l00, 1.0 / l11, 1.0 / l22
    diag_ok = np.isfinite(m00) & np.isfinite(m11) & np.isfinite(m22) & (l00 > 0) & (l11 > 0) & (l22 > 0)
    if not np.all(diag_ok):
        bad = int(np.flatnonzero(~diag_ok)[0])
        raise NumericDegeneracyError("directional covariance not positive definite", bad)
    m10 = -l10 * m00 * m11
    m21 = -l21 * m11 * m22
    m20 = -(l20 * m00 + l21 * m10) * m22
    inv_l = np.zeros_like(batch)
    inv_l[:, 0, 0], inv_l[:, 1, 1], inv_l[:, 2, 2] = m00, m11, m22
    inv_l[:, 1, 0], inv_l[:, 2, 1], inv_l[:, 2, 0] = m10, m21, m20
    out = np.swapaxes(inv_l, 1, 2) @ inv_l
    return out.reshape(a.shape)


def _mean_from_parts(mu_p, regression, offset):
    return mu_p + np.einsum("...ij,...j->...i", regression, offset)


def _mahalanobis(precision, offset):
    dist = np.einsum("...i,...ij,...j->...", offset, precision, offset)
    negative = dist < 0
    if np.any(negative):
        counters["negative_mahalanobis"] += int(np.sum(negative))
        dist = np.maximum(dist, 0.0)
    return dist


def _opacity_factor(lambda_opa, dist):
    return np.exp(np.maximum(-lambda_opa * dist, EXP_FLOOR))


def conditional_mean(mu_p, mu_d, sigma_pd, sigma_d, d):
    precision = inv_spd3(jittered(sigma_d))
    regression = np.asarray(sigma_pd) @ precision
    return _mean_from_parts(np.asarray(mu_p, float), regression,
                            np.asarray(d, float) - np.asarray(mu_d, float))


def conditional_cov(sigma_p, sigma_pd, sigma_d):
    sigma_pd = np.asarray(sigma_pd, dtype=np.float64)
    precision = inv_spd3(jittered(sigma_d))
    return np.asarray(sigma_p, float) - sigma_pd @ precision @ np.swapaxes(sigma_pd, -1, -2)


def mahalanobis(mu_d, sigma_d, d):
    offset = np.asarray(d, float) - np.asarray(mu_d, float)
    return _mahalanobis(inv_spd3(jittered(sigma_d)), offset)


def opacity_factor(lambda_opa, dist):
    """``f_cond = exp(-lambda_opa * D)`` with the exponent floored at -700."""
    return _opacity_factor(np.asarray(lambda_opa, float), np.maximum(np.asarray(dist, float), 0.0))


def conditional_opacity(alpha, mu_d, sigma_d, d, lambda_opa):
    return np.asarray(alpha, float) * opacity_factor(lambda_opa, mahalanobis(mu_d, sigma_d, d))


def extract_scale_rotation(sigma_cond):
    """Scale and right-handed rotation of a PSD 3x3 covariance via SVD.

    Returns ``(S, R)`` with singular values in descending order and
    ``R @ diag(S**2) @ R.T == sigma_cond``.
    """
    sigma_cond = np.asarray(sigma_cond, dtype=np.float64)
    try:
        u, sv, _ = np.linalg.svd(sigma_cond)
    except np.linalg.LinAlgError as exc:
        raise NumericDegeneracyError(f"SVD did not converge: {exc}") from exc
    rot = u.copy()
    sign = np.sign(np.linalg.det(rot))
    rot[..., :, 2] *= sign[..., None]
    return np.sqrt(np.maximum(sv, 0.0)), rot


def view_directions(mu_p, camera_center) -> np.ndarray:
    """Per-Gaussian unit direction from the camera center to ``mu_p``."""
    v = np.asarray(mu_p, float) - np.asarray(camera_center, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class SliceResult:
    """Batched slice output plus the intermediates the backward pass reuses."""

    cg: ConditionalGaussian3D
    L: np.ndarray
    sigma_pd: np.ndarray
    precision: np.ndarray
    regression: np.ndarray
    offset: np.ndarray
    dist: np.ndarray
    factor: np.ndarray
    alpha: np.ndarray
    lambdas: np.ndarray
    mu_d: np.ndarray
    dirs: np.ndarray


def slice_scene(scene: Scene, dirs, options: SliceOptions | None = None,
                want_scale_rotation: bool = False) -> SliceResult:
    """Slice every Gaussian of ``scene`` at its own direction ``dirs[i]``."""
    options = options or SliceOptions()
    dirs = np.broadcast_to(np.asarray(dirs, dtype=np.float64), scene.mu_p.shape)
    L = activate_cholesky(scene.raw_L)
    sigma_p, sigma_pd, sigma_d = partition(covariance(L))
    precision = inv_spd3(jittered(sigma_d))
    regression = sigma_pd @ precision
    mu_d = direction_means(scene.mu_d, options.normalize_mu_d)
    offset = dirs - mu_d
    mu_cond = _mean_from_parts(scene.mu_p, regression, offset)
    sigma_cond = sigma_p - regression @ np.swapaxes(sigma_pd, -1, -2)
    dist = _mahalanobis(precision, offset)
    lambdas = options.lambdas(scene)
    factor = _opacity_factor(lambdas, dist)
    alpha = sigmoid(scene.raw_alpha)
    cg = ConditionalGaussian3D(
        mu_cond=mu_cond, sigma_cond=sigma_cond, alpha_cond=alpha * factor,
        color=eval_color(scene.sh, dirs),
    )
    if want_scale_rotation:
        cg.scale, cg.rotation = extract_scale_rotation(sigma_cond)
    return SliceResult(cg=cg, L=L, sigma_pd=sigma_pd, precision=precision,
                       regression=regression, offset=offset, dist=dist, factor=factor,
                       alpha=alpha, lambdas=lambdas, mu_d=mu_d, dirs=dirs)


def slice(g, d, want_scale_rotation: bool = False,
          options: SliceOptions | None = None) -> ConditionalGaussian3D:
    """Slice a single :class:`~sixdgs.gaussians.Gaussian6D` at direction ``d``."""
    scene = Scene.from_gaussians([g])
    res = slice_scene(scene, np.asarray(d, float)[None], options, want_scale_rotation)
    cg = res.cg
    return ConditionalGaussian3D(
        mu_cond=cg.mu_cond[0], sigma_cond=cg.sigma_cond[0], alpha_cond=float(cg.alpha_cond[0]),
        color=cg.color[0],
        scale=None if cg.scale is None else cg.scale[0],
        rotation=None if cg.rotation is None else cg.rotation[0],
    )


@dataclass
class InferenceCache:
    """Direction-independent parts of the slice, computed once per scene."""

    mu_p: np.ndarray
    mu_d: np.ndarray
    sigma_cond: np.ndarray
    regression: np.ndarray
    precision: np.ndarray
    alpha: np.ndarray
    lambdas: np.ndarray
    sh: np.ndarray


def precompute_inference(scene: Scene, options: SliceOptions | None = None) -> InferenceCache:
    options = options or SliceOptions()
    L = activate_cholesky(scene.raw_L)
    sigma_p, sigma_pd, sigma_d = partition(covariance(L))
    precision = inv_spd3(jittered(sigma_d))
    regression = sigma_pd @ precision
    return InferenceCache(
        mu_p=scene.mu_p.copy(), mu_d=direction_means(scene.mu_d, options.normalize_mu_d).copy(),
        sigma_cond=sigma_p - regression @ np.swapaxes(sigma_pd, -1, -2),
        regression=regression, precision=precision,
        alpha=sigmoid(scene.raw_alpha), lambdas=options.lambdas(scene), sh=scene.sh.copy(),
    )


def slice_cached(cache: InferenceCache, dirs, with_color: bool = True) -> ConditionalGaussian3D:
    """Per-view slice reusing :func:`precompute_inference`; performs no inversion."""
    dirs = np.broadcast_to(np.asarray(dirs, dtype=np.float64), cache.mu_p.shape)
    offset = dirs - cache.mu_d
    mu_cond = _mean_from_parts(cache.mu_p, cache.regression, offset)
    factor = _opacity_factor(cache.lambdas, _mahalanobis(cache.precision, offset))
    color = eval_color(cache.sh, dirs) if with_color else None
    return ConditionalGaussian3D(mu_cond=mu_cond, sigma_cond=cache.sigma_cond,
                                 alpha_cond=cache.alpha * factor, color=color)
