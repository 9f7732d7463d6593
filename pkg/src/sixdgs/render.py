"""Scene rendering and analytic gradients of the training loss.

The forward chain per view is

    raw params -> slice at d = normalize(mu_p - camera center)
               -> EWA projection -> tile compositing -> image -> loss

and :func:`backward` walks it in reverse by hand.  S and R from the SVD
never enter the loss, so they have no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .gaussians import DIAG, TRIL_COLS, TRIL_ROWS, Scene, sigmoid
from .metrics import ImageSizeError, ssim_with_grad
from .raster import (
    DILATION,
    Image,
    Projection,
    RasterState,
    composite_reference,
    project,
    rasterize_splats,
    rasterize_splats_backward,
)
from .sh import eval_sh_basis, sh_basis_jacobian
from .slicing import JITTER, SliceOptions, SliceResult, slice_scene, view_directions

LAMBDA_SSIM = 0.2


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, param: str, index: int):
        super().__init__(f"non-finite gradient for {param} of gaussian {index}")
        self.param = param
        self.index = index


def _directions(scene: Scene, cam: Camera, dirs) -> np.ndarray:
    if dirs is None:
        return view_directions(scene.mu_p, cam.center)
    dirs = np.asarray(dirs, dtype=np.float64)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return np.broadcast_to(dirs, scene.mu_p.shape)


@dataclass
class ViewForward:
    """A rendered view plus the state its backward pass needs."""

    cam: Camera
    rgb: np.ndarray
    sliced: SliceResult
    proj: Projection
    raster: RasterState | None
    dirs_overridden: bool
    background: np.ndarray


def render_view(scene: Scene, cam: Camera, options: SliceOptions | None = None, *,
                dirs=None, renderer: str = "tile", dilation: float = DILATION,
                background=None) -> ViewForward:
    options = options or SliceOptions()
    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    d = _directions(scene, cam, dirs)
    sliced = slice_scene(scene, d, options)
    proj = project(sliced.cg, cam, dilation)
    if renderer == "tile":
        rgb, state = rasterize_splats(proj.splats, proj.conic, cam.width, cam.height, bg)
    elif renderer == "reference":
        rgb, state = composite_reference(proj.splats, proj.conic, cam.width, cam.height, bg), None
    else:
        raise ValueError(f"unknown renderer {renderer!r}")
    return ViewForward(cam, rgb, sliced, proj, state, dirs is not None, bg)


def render(scene: Scene, cam: Camera, options: SliceOptions | None = None, **kwargs) -> Image:
    """Render ``scene`` from ``cam``; see :func:`render_view` for keywords."""
    return Image(render_view(scene, cam, options, **kwargs).rgb)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def _rgb(img) -> np.ndarray:
    return np.asarray(getattr(img, "rgb", img), dtype=np.float64)


def loss(rendered, target, lambda_ssim: float = LAMBDA_SSIM) -> float:
    """``(1 - lambda) * L1 + lambda * (1 - SSIM)``."""
    return loss_and_grad(rendered, target, lambda_ssim)[0]


def loss_and_grad(rendered, target, lambda_ssim: float = LAMBDA_SSIM):
    r, t = _rgb(rendered), _rgb(target)
    if r.shape != t.shape:
        raise ImageSizeError(f"image sizes differ: {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim_with_grad(r, t)
        value += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * ds
    return value, grad


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

@dataclass
class GradientSet:
    """Loss gradients for every raw parameter group, plus densification signals.

    ``viewspace`` holds, per Gaussian, the summed per-view norms of the
    screen-space mean gradient in NDC units; ``seen`` counts the views in
    which the Gaussian survived projection.
    """

    mu_p: np.ndarray
    mu_d: np.ndarray
    raw_L: np.ndarray
    raw_alpha: np.ndarray
    sh: np.ndarray
    raw_lambda: np.ndarray
    viewspace: np.ndarray = field(default=None)
    seen: np.ndarray = field(default=None)
    max_alpha_cond: np.ndarray = field(default=None)

    GROUPS = Scene.GROUPS

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 21)), np.zeros(n),
                   np.zeros((n, 3, 16)), np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64),
                   np.zeros(n))

    def groups(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.GROUPS}

    def check_finite(self):
        for name, arr in self.groups().items():
            bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
            if bad.any():
                raise NonFiniteGradientError(name, int(np.flatnonzero(bad)[0]))


def _conic_backward(cov2d, g_conic):
    """Gradient w.r.t. the (00, 01, 11) entries of cov2d from conic gradients."""
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    inv2 = 1.0 / (det * det)
    ga, gb, gc = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    dA = ga * (-C * C * inv2) + gb * (B * C * inv2) + gc * (1.0 / det - A * C * inv2)
    dB = ga * (2 * B * C * inv2) + gb * (-1.0 / det - 2 * B * B * inv2) + gc * (2 * A * B * inv2)
    dC = ga * (1.0 / det - A * C * inv2) + gb * (A * B * inv2) + gc * (-A * A * inv2)
    g = np.zeros_like(cov2d)
    g[:, 0, 0], g[:, 0, 1], g[:, 1, 1] = dA, dB, dC
    return g


def _projection_backward(proj: Projection, cam: Camera, g_splat):
    """Map per-splat (mean2d, conic, alpha, color) grads to mu_cond / Sigma_cond."""
    g_mean, g_conic = g_splat[:, 0:2], g_splat[:, 2:5]
    g_cov2d = _conic_backward(proj.splats.cov2d, g_conic)
    J, M, R = proj.jac, proj.cov_cam, cam.rotation
    g_M = np.swapaxes(J, 1, 2) @ g_cov2d @ J
    g_sigma = R.T @ g_M @ R
    g_J = g_cov2d @ J @ np.swapaxes(M, 1, 2) + np.swapaxes(g_cov2d, 1, 2) @ J @ M

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    iz, iz2, iz3 = 1.0 / z, 1.0 / z ** 2, 1.0 / z ** 3
    gu, gv = g_mean[:, 0], g_mean[:, 1]
    gx = gu * fx * iz + g_J[:, 0, 2] * (-fx * iz2)
    gy = gv * fy * iz + g_J[:, 1, 2] * (-fy * iz2)
    gz = (-gu * fx * x * iz2 - gv * fy * y * iz2
          - g_J[:, 0, 0] * fx * iz2 + g_J[:, 0, 2] * 2 * fx * x * iz3
          - g_J[:, 1, 1] * fy * iz2 + g_J[:, 1, 2] * 2 * fy * y * iz3)
    g_mu = np.stack([gx, gy, gz], 1) @ R
    return g_mu, g_sigma


def _slice_backward(scene: Scene, sl: SliceResult, options: SliceOptions, g_mu, g_sigma,
                    g_alpha_cond, g_color, out: GradientSet, cam_center):
    """Accumulate raw-parameter gradients into ``out`` (full-length arrays)."""
    n = len(scene)
    P, Spd, reg, x = sl.precision, sl.sigma_pd, sl.regression, sl.offset
    # exponent floor and D clamp make f locally constant
    active = (-sl.lambdas * sl.dist > -700.0)
    g_D = np.where(active, g_alpha_cond * sl.alpha * sl.factor * (-sl.lambdas), 0.0)
    if options.lambda_opa is None:
        g_lam = np.where(active, g_alpha_cond * sl.alpha * sl.factor * (-sl.dist), 0.0)
        out.raw_lambda += g_lam * sl.lambdas * (1 - sl.lambdas)
    out.raw_alpha += g_alpha_cond * sl.factor * sl.alpha * (1 - sl.alpha)

    u = np.einsum("nij,nj->ni", P, x)
    g_Spd = g_mu[:, :, None] * u[:, None, :] - 2.0 * _sym(g_sigma) @ Spd @ P
    g_x = np.einsum("nij,nj->ni", np.swapaxes(reg, 1, 2), g_mu) + 2.0 * u * g_D[:, None]
    SpdT_gmu = np.einsum("nji,nj->ni", Spd, g_mu)
    g_P = (SpdT_gmu[:, :, None] * x[:, None, :]
           - np.swapaxes(Spd, 1, 2) @ g_sigma @ Spd
           + g_D[:, None, None] * x[:, :, None] * x[:, None, :])
    g_Sd_jit = -P @ g_P @ P
    tr = np.trace(g_Sd_jit, axis1=1, axis2=2)
    g_Sd = g_Sd_jit + (JITTER / 3.0) * tr[:, None, None] * np.eye(3)

    g_Sigma = np.zeros((n, 6, 6))
    g_Sigma[:, :3, :3] = g_sigma
    g_Sigma[:, :3, 3:] = g_Spd
    g_Sigma[:, 3:, 3:] = g_Sd
    g_L = (g_Sigma + np.swapaxes(g_Sigma, 1, 2)) @ sl.L
    Ld = sl.L[:, DIAG, DIAG]
    Lo = sl.L[:, TRIL_ROWS, TRIL_COLS]
    out.raw_L[:, :6] += g_L[:, DIAG, DIAG] * Ld
    out.raw_L[:, 6:] += g_L[:, TRIL_ROWS, TRIL_COLS] * (1 - Lo * Lo)

    out.mu_p += g_mu
    g_mud = -g_x
    if options.normalize_mu_d:
        norm = np.linalg.norm(scene.mu_d, axis=1, keepdims=True)
        m = sl.mu_d
        g_mud = (g_mud - m * np.sum(m * g_mud, 1, keepdims=True)) / norm
    out.mu_d += g_mud

    # color = sigmoid(beta . Y(d))
    d = sl.dirs
    basis = eval_sh_basis(d)
    c = sl.cg.color
    g_z = g_color * c * (1 - c)
    out.sh += g_z[:, :, None] * basis[:, None, :]
    if cam_center is not None:
        g_d = g_x + np.einsum("nc,nck,nkj->nj", g_z, scene.sh, sh_basis_jacobian(d))
        # d = v / |v| with v = mu_p - camera center
        v = scene.mu_p - cam_center
        vn = np.linalg.norm(v, axis=1, keepdims=True)
        out.mu_p += (g_d - d * np.sum(d * g_d, 1, keepdims=True)) / vn


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def backward_view(scene: Scene, fwd: ViewForward, grad_rgb, options: SliceOptions | None = None,
                  out: GradientSet | None = None) -> GradientSet:
    """Accumulate gradients of one view's loss given ``dL/d(rgb)``."""
    options = options or SliceOptions()
    n = len(scene)
    out = GradientSet.zeros(n) if out is None else out
    cam, proj = fwd.cam, fwd.proj
    idx = proj.index
    if fwd.raster is None:
        raise ValueError("backward needs a tile-rendered forward pass")
    g_splat = rasterize_splats_backward(proj.splats, proj.conic, cam.width, cam.height,
                                        fwd.background, fwd.raster, grad_rgb)
    g_mu_k, g_sig_k = _projection_backward(proj, cam, g_splat)
    g_mu = np.zeros((n, 3))
    g_sigma = np.zeros((n, 3, 3))
    g_alpha = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_mu[idx], g_sigma[idx] = g_mu_k, g_sig_k
    g_alpha[idx] = g_splat[:, 5]
    g_color[idx] = g_splat[:, 6:9]

    _slice_backward(scene, fwd.sliced, options, g_mu, g_sigma, g_alpha, g_color, out,
                    None if fwd.dirs_overridden else cam.center)
    ndc = g_splat[:, 0:2] * np.array([cam.width / 2.0, cam.height / 2.0])
    out.viewspace[idx] += np.linalg.norm(ndc, axis=1)
    out.seen[idx] += 1
    out.max_alpha_cond[idx] = np.maximum(out.max_alpha_cond[idx], proj.splats.alpha)
    return out


def backward(scene: Scene, cameras, targets, options: SliceOptions | None = None,
             lambda_ssim: float = LAMBDA_SSIM, dilation: float = DILATION):
    """Mean loss over a batch of views and its :class:`GradientSet`."""
    options = options or SliceOptions()
    if len(scene) == 0:
        raise ValueError("backward needs a non-empty scene")
    cameras, targets = list(cameras), list(targets)
    out = GradientSet.zeros(len(scene))
    total = 0.0
    scale = 1.0 / len(cameras)
    for cam, target in zip(cameras, targets):
        fwd = render_view(scene, cam, options, dilation=dilation)
        value, g_rgb = loss_and_grad(fwd.rgb, target, lambda_ssim)
        total += value * scale
        backward_view(scene, fwd, g_rgb * scale, options, out)
    out.check_finite()
    return total, out


def activated_opacity(scene: Scene) -> np.ndarray:
    return sigmoid(scene.raw_alpha)
