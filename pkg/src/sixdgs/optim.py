"""Adam and the training loop.

Schedule points (densification window, opacity resets, the learnable
lambda window, positional learning-rate decay) are fractions of the total
iteration count so short runs keep the proportions of a 30k schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .density import DensifyStats, DensifyThresholds, densify_and_prune, reset_opacity
from .gaussians import TRIL_COLS, TRIL_ROWS, Scene, raw_lambda_for
from .metrics import psnr
from .render import GradientSet, backward_view, loss_and_grad, render_view
from .sh import BAND
from .slicing import SliceOptions

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

# packed off-diagonal slots of the position/direction cross block (rows 3..5, cols 0..2)
CROSS_SLOTS = 6 + np.flatnonzero((TRIL_ROWS >= 3) & (TRIL_COLS < 3))


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint: Scene):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_scene(cls, scene: Scene) -> "AdamState":
        params = scene.params()
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})

    def remap(self, origin: np.ndarray):
        """Follow a densify/prune: carried rows keep moments, new rows start at zero."""
        carried = origin >= 0
        for store in (self.m, self.v):
            for k, a in store.items():
                new = np.zeros((len(origin),) + a.shape[1:])
                new[carried] = a[origin[carried]]
                store[k] = new

    def zero_group(self, name: str):
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr_table: dict[str, float | np.ndarray]):
    """In-place Adam update; ``lr_table`` may hold per-element learning-rate arrays."""
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        lr = lr_table.get(name, 0.0)
        if np.all(np.asarray(lr) == 0):
            continue
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)


@dataclass
class TrainConfig:
    iterations: int = 30_000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_covariance: float = 1e-2
    lr_direction: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_lambda: float | None = None
    lambda_ssim: float = 0.2
    tau_min: float = 0.01
    lambda_opa_mode: str = "frozen"
    lambda_opa: float = 0.35
    lambda_window: tuple = (0.5, 28 / 30)
    densify_from: float = 500 / 30_000
    densify_until: float = 0.5
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    opacity_reset: bool = True
    opacity_reset_every: float = 0.1
    prune_big: bool = True
    no_sh: bool = False
    freeze_cross_covariance: bool = False
    normalize_mu_d: bool = False
    dilation: float = 0.3
    seed: int = 0
    log_every: int = 10

    def validate(self):
        rates = [self.lr_position, self.lr_position_final, self.lr_covariance,
                 self.lr_direction, self.lr_sh, self.lr_opacity]
        if self.lr_lambda is not None:
            rates.append(self.lr_lambda)
        if any(not (r > 0) for r in rates):
            raise ValueError("learning rates must be > 0")
        if not 0 <= self.lambda_ssim <= 1:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lambda_opa_mode not in ("frozen", "learnable"):
            raise ValueError("lambda_opa_mode must be 'frozen' or 'learnable'")
        if not 0 <= self.lambda_opa <= 1:
            raise ValueError("lambda_opa must lie in [0, 1]")
        lo, hi = self.lambda_window
        if not 0 <= lo <= hi <= 1:
            raise ValueError("lambda_window must satisfy 0 <= start <= end <= 1")
        if not 0 <= self.densify_from <= self.densify_until <= 1:
            raise ValueError("densify window must satisfy 0 <= from <= until <= 1")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if not 0 < self.tau_min < 1:
            raise ValueError("tau_min must lie in (0, 1)")

    def slice_options(self) -> SliceOptions:
        lam = None if self.lambda_opa_mode == "learnable" else self.lambda_opa
        return SliceOptions(lambda_opa=lam, normalize_mu_d=self.normalize_mu_d)

    def at(self, frac: float) -> int:
        return int(round(frac * self.iterations))

    def position_lr(self, iteration: int, extent: float) -> float:
        t = min(max(iteration / max(self.iterations, 1), 0.0), 1.0)
        log_lr = (1 - t) * math.log(self.lr_position) + t * math.log(self.lr_position_final)
        return extent * math.exp(log_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_window"] = list(self.lambda_window)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        data = dict(data)
        if "lambda_window" in data:
            data["lambda_window"] = tuple(data["lambda_window"])
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class LogRecord:
    iteration: int
    loss: float
    psnr: float
    gaussians: int

    def line(self) -> str:
        return f"{self.iteration}\t{self.loss:.8f}\t{self.psnr:.4f}\t{self.gaussians}"


def _learning_rates(cfg: TrainConfig, iteration: int, extent: float, n: int) -> dict:
    lr_sh = np.where(BAND == 0, cfg.lr_sh, 0.0 if cfg.no_sh else cfg.lr_sh / 20.0)
    lr_L = np.full(21, cfg.lr_covariance)
    if cfg.freeze_cross_covariance:
        lr_L[CROSS_SLOTS] = 0.0
    lo, hi = cfg.at(cfg.lambda_window[0]), cfg.at(cfg.lambda_window[1])
    lambda_live = cfg.lambda_opa_mode == "learnable" and lo <= iteration < hi
    return {
        "mu_p": cfg.position_lr(iteration, extent),
        "mu_d": cfg.lr_direction,
        "raw_L": lr_L,
        "raw_alpha": cfg.lr_opacity,
        "sh": np.broadcast_to(lr_sh, (3, 16)),
        "raw_lambda": (cfg.lr_lambda or cfg.lr_opacity) if lambda_live else 0.0,
    }


def prepare_scene(scene: Scene, cfg: TrainConfig) -> Scene:
    """Apply the mode constraints a config places on raw parameters."""
    scene = scene.copy()
    if cfg.no_sh:
        scene.sh[:, :, BAND > 0] = 0.0
    if cfg.freeze_cross_covariance:
        scene.raw_L[:, CROSS_SLOTS] = 0.0
    if cfg.lambda_opa_mode == "frozen":
        scene.raw_lambda[:] = raw_lambda_for(cfg.lambda_opa)
    return scene


@dataclass
class TrainResult:
    scene: Scene
    log: list[LogRecord]


def train(scene0: Scene, cameras, images, cfg: TrainConfig, *, extent: float,
          probe=None, stream=None) -> TrainResult:
    """Fit ``scene0`` to posed images.

    ``probe`` is an optional ``(camera, image)`` pair evaluated for the log;
    ``stream`` receives one tab-separated record per logged iteration.
    """
    cfg.validate()
    cameras, images = list(cameras), [np.asarray(getattr(i, "rgb", i), float) for i in images]
    if not cameras or len(cameras) != len(images):
        raise ValueError("need a non-empty dataset with one image per camera")
    scene = prepare_scene(scene0, cfg) if cfg.iterations else scene0.copy()
    rng = np.random.default_rng(cfg.seed)
    options = cfg.slice_options()
    probe = probe or (cameras[0], images[0])
    state = AdamState.for_scene(scene)
    stats = DensifyStats.zeros(len(scene))
    records: list[LogRecord] = []

    d_from, d_until = cfg.at(cfg.densify_from), cfg.at(cfg.densify_until)
    reset_every = max(cfg.at(cfg.opacity_reset_every), 1)
    thresholds = DensifyThresholds(extent=extent, grad=cfg.densify_grad_threshold,
                                   percent_dense=cfg.percent_dense, tau_min=cfg.tau_min)
    order: list[int] = []

    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(cameras)))
        view = order.pop()
        if len(scene) == 0:
            value = float(np.mean(np.abs(images[view] - scene.background)))
            grads = GradientSet.zeros(0)
        else:
            fwd = render_view(scene, cameras[view], options, dilation=cfg.dilation)
            value, g_rgb = loss_and_grad(fwd.rgb, images[view], cfg.lambda_ssim)
            if not math.isfinite(value):
                raise TrainingDiverged(it, scene)
            grads = backward_view(scene, fwd, g_rgb, options)
            grads.check_finite()
            adam_step(scene.params(), grads.groups(), state,
                      _learning_rates(cfg, it, extent, len(scene)))

        if it < d_until:
            stats.add(grads)
            if it > d_from and it % cfg.densify_interval == 0:
                thresholds.big_fraction = 0.1 if (cfg.prune_big and it > reset_every) else None
                scene, origin = densify_and_prune(scene, stats, thresholds, rng, options)
                state.remap(origin)
                stats = DensifyStats.zeros(len(scene))
            if cfg.opacity_reset and it % reset_every == 0:
                scene = reset_opacity(scene)
                state.zero_group("raw_alpha")

        if it % cfg.log_every == 0 or it == cfg.iterations:
            p_cam, p_img = probe
            p_rgb = render_view(scene, p_cam, options, dilation=cfg.dilation).rgb
            rec = LogRecord(it, float(value), psnr(p_rgb, p_img), len(scene))
            records.append(rec)
            if stream is not None:
                stream.write(rec.line() + "\n")
            log.debug(rec.line())
    return TrainResult(scene, records)
