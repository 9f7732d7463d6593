"""Adaptive density control: clone, split and prune of 6D Gaussians.

Scale is read from the SVD of the (direction-independent) conditional
covariance.  Splitting shrinks only the positional rows of the Cholesky
factor, so the directional block of the covariance is left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import Scene, activate_cholesky, covariance, logit, sigmoid
from .slicing import SliceOptions, extract_scale_rotation, precompute_inference

SPLIT_SHRINK = 1.6
# packed off-diagonal slots (1,0), (2,0), (2,1): the positional rows of L
_POS_OFFDIAG = np.array([0, 1, 2])


@dataclass
class DensifyStats:
    """Running screen-space gradient statistics per Gaussian."""

    grad_accum: np.ndarray
    denom: np.ndarray
    max_alpha_cond: np.ndarray
    pos_grad: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros((n, 3)))

    def add(self, grads):
        self.grad_accum += grads.viewspace
        self.denom += grads.seen
        self.max_alpha_cond = np.maximum(self.max_alpha_cond, grads.max_alpha_cond)
        self.pos_grad += grads.mu_p

    def mean_grad(self) -> np.ndarray:
        out = np.zeros_like(self.grad_accum)
        seen = self.denom > 0
        out[seen] = self.grad_accum[seen] / self.denom[seen]
        return out


@dataclass
class DensifyThresholds:
    extent: float
    grad: float = 2e-4
    percent_dense: float = 0.01
    tau_min: float = 0.01
    # world-space prune bound as a fraction of the extent; None disables it
    big_fraction: float | None = None
    clone_step: float = 0.5


def gaussian_scales(scene: Scene, options: SliceOptions | None = None) -> np.ndarray:
    """Per-Gaussian SVD scales ``(N, 3)`` of the conditional covariance."""
    if len(scene) == 0:
        return np.zeros((0, 3))
    cache = precompute_inference(scene, options)
    scale, _ = extract_scale_rotation(cache.sigma_cond)
    return scale


def shrink_positional_rows(raw_L: np.ndarray, factor: float = SPLIT_SHRINK) -> np.ndarray:
    """Raw factor whose positional rows of L are divided by ``factor``."""
    out = np.array(raw_L, dtype=np.float64, copy=True)
    out[..., :3] -= np.log(factor)
    off = out[..., 6:]
    off[..., _POS_OFFDIAG] = np.arctanh(np.tanh(off[..., _POS_OFFDIAG]) / factor)
    return out


def densify_and_prune(scene: Scene, stats: DensifyStats, thr: DensifyThresholds,
                      rng: np.random.Generator, options: SliceOptions | None = None):
    """One clone/split/prune round.

    Returns ``(new_scene, origin)`` where ``origin[i]`` is the index in the
    input scene that Gaussian ``i`` was carried over from, or -1 for a
    newly created one.
    """
    n = len(scene)
    if n == 0:
        return scene.copy(), np.zeros(0, dtype=np.int64)
    grads = stats.mean_grad()
    max_scale = gaussian_scales(scene, options).max(axis=1)
    limit = thr.percent_dense * thr.extent
    hot = grads > thr.grad

    clone = hot & (max_scale < limit)
    split = hot & (max_scale >= limit)

    # clones: copy, nudged against the accumulated positional gradient
    cloned = scene.take(clone)
    g = stats.pos_grad[clone]
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    step = np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)
    cloned.mu_p = cloned.mu_p - thr.clone_step * max_scale[clone, None] * step

    # splits: two children sampled from the positional block
    parents = scene.take(split)
    children = parents.take(np.repeat(np.arange(len(parents)), 2))
    if len(parents):
        sig_p = covariance(activate_cholesky(parents.raw_L))[:, :3, :3]
        chol = np.linalg.cholesky(np.repeat(sig_p, 2, axis=0))
        eps = rng.standard_normal((len(children), 3))
        children.mu_p = children.mu_p + np.einsum("nij,nj->ni", chol, eps)
        children.raw_L = shrink_positional_rows(children.raw_L)

    keep = ~split
    merged = scene.take(keep).extend(cloned).extend(children)
    origin = np.concatenate([np.flatnonzero(keep), np.full(len(cloned) + len(children), -1)])

    alive = sigmoid(merged.raw_alpha) >= thr.tau_min
    if thr.big_fraction is not None and len(merged):
        alive &= gaussian_scales(merged, options).max(axis=1) <= thr.big_fraction * thr.extent
    return merged.take(alive), origin[alive]


def prune(scene: Scene, tau_min: float):
    """Drop Gaussians whose base opacity is below ``tau_min``."""
    alive = sigmoid(scene.raw_alpha) >= tau_min
    return scene.take(alive), np.flatnonzero(alive)


def reset_opacity(scene: Scene, ceiling: float = 0.01) -> Scene:
    """Clamp opacities to at most ``ceiling``; idempotent."""
    out = scene.copy()
    out.raw_alpha = np.minimum(out.raw_alpha, float(logit(ceiling)))
    return out
