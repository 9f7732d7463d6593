"""EWA projection and front-to-back alpha compositing.

Two renderers share one projection and one compositing rule:

* :func:`rasterize` bins splats into 16x16 tiles, sorts per tile and runs a
  numba kernel per tile (parallel over tiles).
* :func:`rasterize_reference` loops over all globally depth-sorted splats for
  every pixel with no culling; it exists as the correctness oracle.

Compositing rule, per pixel, splats in ascending depth (ties by index):
``a = min(0.99, alpha * exp(-0.5 d^T conic d))``; skip if ``a < 1/255``;
stop before any splat that would drive transmittance below ``1e-4``;
finally add ``T * background``.  Pixel ``(i, j)`` samples at ``(i + .5, j + .5)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera
from .slicing import ConditionalGaussian3D

TILE = 16
DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4

counters = {"nonfinite_splats": 0}

# an outdated system TBB only means numba falls back to another threading layer
warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)


@dataclass
class Splat2D:
    """Screen-space splats; arrays carry a leading batch axis."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    color: np.ndarray

    def __len__(self) -> int:
        return len(self.depth)


@dataclass
class Projection:
    """Batch projection with the intermediates needed by the backward pass.

    ``index`` maps each surviving splat to its position in the input batch.
    """

    splats: Splat2D
    index: np.ndarray
    conic: np.ndarray
    p_cam: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray


@dataclass
class Image:
    """Row-major ``(height, width, 3)`` float image in [0, 1]."""

    rgb: np.ndarray

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


def project(cg: ConditionalGaussian3D, cam: Camera, dilation: float = DILATION) -> Projection:
    """Project a batch of conditional Gaussians; culled ones are dropped."""
    mu = np.atleast_2d(np.asarray(cg.mu_cond, dtype=np.float64))
    sig = np.asarray(cg.sigma_cond, dtype=np.float64).reshape(-1, 3, 3)
    alpha = np.atleast_1d(np.asarray(cg.alpha_cond, dtype=np.float64))
    color = np.atleast_2d(np.asarray(cg.color, dtype=np.float64))
    n = len(mu)

    finite = (np.isfinite(mu).all(1) & np.isfinite(sig).all((1, 2))
              & np.isfinite(alpha) & np.isfinite(color).all(1))
    counters["nonfinite_splats"] += int(n - finite.sum())
    R, t = cam.rotation, cam.translation
    p_cam = np.where(finite[:, None], mu, 0.0) @ R.T + t
    z = p_cam[:, 2]
    keep = finite & (z > cam.near) & (z < cam.far)

    fx, fy = cam.fx, cam.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(keep, 1.0 / z, 0.0)
        jac = np.zeros((n, 2, 3))
        jac[:, 0, 0] = fx * inv_z
        jac[:, 0, 2] = -fx * p_cam[:, 0] * inv_z ** 2
        jac[:, 1, 1] = fy * inv_z
        jac[:, 1, 2] = -fy * p_cam[:, 1] * inv_z ** 2
        mean2d = np.stack([fx * p_cam[:, 0] * inv_z + cam.cx, fy * p_cam[:, 1] * inv_z + cam.cy], 1)
    sig = np.where(finite[:, None, None], sig, 0.0)
    cov_cam = R @ sig @ R.T
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2) + dilation * np.eye(2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    keep &= det > 0
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    r3 = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    keep &= ((mean2d[:, 0] + r3 > 0) & (mean2d[:, 0] - r3 < cam.width)
             & (mean2d[:, 1] + r3 > 0) & (mean2d[:, 1] - r3 < cam.height))

    idx = np.flatnonzero(keep)
    det_k = det[idx]
    conic = np.stack([c[idx] / det_k, -b[idx] / det_k, a[idx] / det_k], 1)
    splats = Splat2D(mean2d=mean2d[idx], cov2d=cov2d[idx], depth=z[idx],
                     alpha=alpha[idx], color=color[idx])
    return Projection(splats=splats, index=idx, conic=conic, p_cam=p_cam[idx],
                      jac=jac[idx], cov_cam=cov_cam[idx])


def project_gaussian(cg: ConditionalGaussian3D, cam: Camera, dilation: float = DILATION):
    """Project one conditional Gaussian; ``None`` when culled."""
    single = ConditionalGaussian3D(
        mu_cond=np.asarray(cg.mu_cond, float)[None], sigma_cond=np.asarray(cg.sigma_cond, float)[None],
        alpha_cond=np.atleast_1d(cg.alpha_cond), color=np.asarray(cg.color, float)[None])
    proj = project(single, cam, dilation)
    if len(proj.index) == 0:
        return None
    s = proj.splats
    return Splat2D(mean2d=s.mean2d[0], cov2d=s.cov2d[0], depth=float(s.depth[0]),
                   alpha=float(s.alpha[0]), color=s.color[0])


# --------------------------------------------------------------------------
# tile binning
# --------------------------------------------------------------------------

@dataclass
class Binning:
    tile_ranges: np.ndarray  # (n_tiles, 2) start/end into instance arrays
    inst_splat: np.ndarray   # splat index per instance, ordered by tile then depth
    tiles_x: int
    tiles_y: int


def bin_splats(splats: Splat2D, conic: np.ndarray, width: int, height: int) -> Binning:
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    amax = np.minimum(splats.alpha, ALPHA_MAX)
    live = amax >= ALPHA_MIN
    # beyond this Mahalanobis radius the splat's alpha is below 1/255 anyway
    r2 = 2.0 * np.log(np.maximum(255.0 * amax, 1.0)) + 1e-6
    r = np.sqrt(r2)
    hx = r * np.sqrt(splats.cov2d[:, 0, 0])
    hy = r * np.sqrt(splats.cov2d[:, 1, 1])
    mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
    # pixel i samples at i + 0.5
    x0 = np.clip(np.floor((mx - hx - 0.5) / TILE), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((mx + hx - 0.5) / TILE), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((my - hy - 0.5) / TILE), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((my + hy - 0.5) / TILE), 0, tiles_y - 1).astype(np.int64)
    off_screen = (mx + hx < 0.5) | (mx - hx > width - 0.5) | (my + hy < 0.5) | (my - hy > height - 0.5)
    live &= ~off_screen
    nx = np.where(live, x1 - x0 + 1, 0)
    ny = np.where(live, y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    splat_of = np.repeat(np.arange(len(counts)), counts)
    start = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(start, counts)
    tx = x0[splat_of] + local % np.maximum(nx[splat_of], 1)
    ty = y0[splat_of] + local // np.maximum(nx[splat_of], 1)
    tile_id = ty * tiles_x + tx
    order = np.lexsort((splat_of, splats.depth[splat_of], tile_id))
    tile_sorted = tile_id[order]
    inst_splat = splat_of[order]
    bounds = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], 1).astype(np.int64)
    return Binning(ranges, inst_splat.astype(np.int64), tiles_x, tiles_y)


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

@numba.njit(parallel=True, cache=True, fastmath=False)
def _forward_kernel(ranges, inst, mean2d, conic, alpha, color, bg, width, height, tiles_x):
    n_tiles = ranges.shape[0]
    out = np.zeros((height, width, 3))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start, end = ranges[tile, 0], ranges[tile, 1]
        m = end - start
        # contiguous copy of this tile's splats: (mx, my, a, b, c, alpha, r, g, b, cutoff)
        loc = np.empty((m, 10))
        for j in range(m):
            s = inst[start + j]
            loc[j, 0] = mean2d[s, 0]
            loc[j, 1] = mean2d[s, 1]
            loc[j, 2] = conic[s, 0]
            loc[j, 3] = conic[s, 1]
            loc[j, 4] = conic[s, 2]
            loc[j, 5] = alpha[s]
            loc[j, 6] = color[s, 0]
            loc[j, 7] = color[s, 1]
            loc[j, 8] = color[s, 2]
            # below this exponent alpha * exp(power) < 1/255 for sure; margin keeps the exact test decisive
            loc[j, 9] = np.log(1.0 / (255.0 * alpha[s])) - 1e-6 if alpha[s] > 0.0 else np.inf
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                fxp = px + 0.5
                fyp = py + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                for j in range(m):
                    dx = fxp - loc[j, 0]
                    dy = fyp - loc[j, 1]
                    power = -0.5 * (loc[j, 2] * dx * dx + loc[j, 4] * dy * dy) - loc[j, 3] * dx * dy
                    if power > 0.0 or power < loc[j, 9]:
                        continue
                    a = loc[j, 5] * np.exp(power)
                    if a > 0.99:
                        a = 0.99
                    if a < 1.0 / 255.0:
                        continue
                    test_t = T * (1.0 - a)
                    if test_t < 1e-4:
                        break
                    w = a * T
                    c0 += w * loc[j, 6]
                    c1 += w * loc[j, 7]
                    c2 += w * loc[j, 8]
                    T = test_t
                    last = j + 1
                out[py, px, 0] = c0 + T * bg[0]
                out[py, px, 1] = c1 + T * bg[1]
                out[py, px, 2] = c2 + T * bg[2]
                final_t[py, px] = T
                n_contrib[py, px] = last
    return out, final_t, n_contrib


@numba.njit(parallel=True, cache=True, fastmath=False)
def _backward_kernel(ranges, inst, mean2d, conic, alpha, color, bg, width, height, tiles_x,
                     final_t, n_contrib, grad_out):
    # per-instance gradient rows: dmean(2), dconic a,b,c (3), dalpha, dcolor(3)
    n_tiles = ranges.shape[0]
    g = np.zeros((inst.shape[0], 9))
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = ranges[tile, 0]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                fxp = px + 0.5
                fyp = py + 0.5
                T = final_t[py, px]
                acc0 = bg[0]
                acc1 = bg[1]
                acc2 = bg[2]
                go0 = grad_out[py, px, 0]
                go1 = grad_out[py, px, 1]
                go2 = grad_out[py, px, 2]
                for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    s = inst[k]
                    dx = fxp - mean2d[s, 0]
                    dy = fyp - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    gauss = np.exp(power)
                    a = alpha[s] * gauss
                    clamped = False
                    if a > 0.99:
                        a = 0.99
                        clamped = True
                    if a < 1.0 / 255.0:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    g[k, 6] += w * go0
                    g[k, 7] += w * go1
                    g[k, 8] += w * go2
                    da = T * ((color[s, 0] - acc0) * go0 + (color[s, 1] - acc1) * go1
                              + (color[s, 2] - acc2) * go2)
                    acc0 = a * color[s, 0] + (1.0 - a) * acc0
                    acc1 = a * color[s, 1] + (1.0 - a) * acc1
                    acc2 = a * color[s, 2] + (1.0 - a) * acc2
                    if clamped:
                        continue
                    g[k, 5] += gauss * da
                    dpow = a * da
                    g[k, 0] += dpow * (conic[s, 0] * dx + conic[s, 1] * dy)
                    g[k, 1] += dpow * (conic[s, 1] * dx + conic[s, 2] * dy)
                    g[k, 2] += -0.5 * dpow * dx * dx
                    g[k, 3] += -dpow * dx * dy
                    g[k, 4] += -0.5 * dpow * dy * dy
    return g


@dataclass
class RasterState:
    """Everything the backward kernel needs from a forward tile render."""

    binning: Binning
    final_t: np.ndarray
    n_contrib: np.ndarray


def _as_arrays(splats: Splat2D, conic):
    return (np.ascontiguousarray(splats.mean2d, dtype=np.float64),
            np.ascontiguousarray(conic, dtype=np.float64),
            np.ascontiguousarray(splats.alpha, dtype=np.float64),
            np.ascontiguousarray(splats.color, dtype=np.float64))


def rasterize_splats(splats: Splat2D, conic, width: int, height: int, background):
    """Tile renderer over already projected splats; returns ``(rgb, state)``."""
    bg = np.asarray(background, dtype=np.float64)
    binning = bin_splats(splats, conic, width, height)
    mean2d, conic_a, alpha, color = _as_arrays(splats, conic)
    rgb, final_t, n_contrib = _forward_kernel(
        binning.tile_ranges, binning.inst_splat, mean2d, conic_a, alpha, color, bg,
        width, height, binning.tiles_x)
    return rgb, RasterState(binning, final_t, n_contrib)


def rasterize_splats_backward(splats: Splat2D, conic, width: int, height: int, background,
                              state: RasterState, grad_rgb) -> np.ndarray:
    """Per-splat gradients ``(n, 9)``: dmean2d, dconic (a, b, c), dalpha, dcolor."""
    mean2d, conic_a, alpha, color = _as_arrays(splats, conic)
    b = state.binning
    per_inst = _backward_kernel(
        b.tile_ranges, b.inst_splat, mean2d, conic_a, alpha, color,
        np.asarray(background, dtype=np.float64), width, height, b.tiles_x,
        state.final_t, state.n_contrib, np.ascontiguousarray(grad_rgb, dtype=np.float64))
    out = np.zeros((len(splats), 9))
    np.add.at(out, b.inst_splat, per_inst)
    return out


def rasterize(cg: ConditionalGaussian3D, cam: Camera, background, dilation: float = DILATION) -> Image:
    proj = project(cg, cam, dilation)
    rgb, _ = rasterize_splats(proj.splats, proj.conic, cam.width, cam.height, background)
    return Image(rgb)


def composite_reference(splats: Splat2D, conic, width: int, height: int, background) -> np.ndarray:
    """Per-pixel compositing over every splat, globally sorted, no culling."""
    bg = np.asarray(background, dtype=np.float64)
    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    out = np.zeros((height, width, 3))
    T = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    order = np.lexsort((np.arange(len(splats)), splats.depth))
    for s in order:
        dx = xs - splats.mean2d[s, 0]
        dy = ys - splats.mean2d[s, 1]
        power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
        a = np.minimum(ALPHA_MAX, splats.alpha[s] * np.exp(power))
        use = ~done & (power <= 0) & (a >= ALPHA_MIN)
        test_t = T * (1 - a)
        stop = use & (test_t < T_MIN)
        done |= stop
        use &= ~stop
        out += np.where(use, a * T, 0.0)[..., None] * splats.color[s]
        T = np.where(use, test_t, T)
    return out + T[..., None] * bg


def rasterize_reference(cg: ConditionalGaussian3D, cam: Camera, background,
                        dilation: float = DILATION) -> Image:
    proj = project(cg, cam, dilation)
    return Image(composite_reference(proj.splats, proj.conic, cam.width, cam.height, background))
