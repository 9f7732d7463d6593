"""Command-line interface: ``sixdgs {synth,train,render,eval,slice,info}``.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import CameraError
from .gaussians import (NumericDegeneracyError, ParameterDomainError, Scene,
                        activate_cholesky, covariance, sigmoid)
from .metrics import psnr, ssim
from .optim import TrainConfig, TrainingDiverged, train
from .render import NonFiniteGradientError, render_view
from .scene_io import (CameraFileError, ImageFileError, SceneFileError, atomic_path,
                       export_slice, load_cameras, load_scene, load_split, save_dataset,
                       save_scene, write_image)
from .slicing import SliceOptions, slice_scene
from .synth import SynthSpec, generate_synthetic, random_cube_init, scene_extent

log = logging.getLogger("sixdgs")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Everything a run reads from ``--config``; unknown keys are rejected."""

    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    init_points: int = 100_000
    init_extent: float = 0.5
    background: tuple = (0.0, 0.0, 0.0)
    fps_repeats: int = 20

    def validate(self):
        self.synth.validate()
        self.train.validate()
        if self.init_points < 1:
            raise ValueError("init_points must be >= 1")
        if self.init_extent <= 0:
            raise ValueError("init_extent must be > 0")
        if len(self.background) != 3 or not all(0 <= b <= 1 for b in self.background):
            raise ValueError("background must be three values in [0, 1]")
        if self.fps_repeats < 1:
            raise ValueError("fps_repeats must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        synth = data.pop("synth", {})
        spec_keys = {f.name for f in fields(SynthSpec)}
        if set(synth) - spec_keys:
            raise ValueError(f"unknown synth keys: {sorted(set(synth) - spec_keys)}")
        if "background" in synth:
            synth["background"] = tuple(synth["background"])
        cfg = cls(synth=SynthSpec(**synth), train=TrainConfig.from_dict(data.pop("train", {})),
                  **data)
        cfg.background = tuple(cfg.background)
        return cfg

    def to_dict(self) -> dict:
        synth = asdict(self.synth)
        synth["background"] = list(synth["background"])
        return {"synth": synth, "train": self.train.to_dict(),
                "init_points": self.init_points, "init_extent": self.init_extent,
                "background": list(self.background), "fps_repeats": self.fps_repeats}


def _load_config(args) -> RunConfig:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        cfg = RunConfig.from_dict(data)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.synth.seed = args.seed
        cfg.train.seed = args.seed
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.lambda_opa is not None:
        if args.lambda_opa == "learnable":
            cfg.train.lambda_opa_mode = "learnable"
        else:
            try:
                cfg.train.lambda_opa = float(args.lambda_opa)
            except ValueError:
                raise ValueError("--lambda-opa takes a number or 'learnable'") from None
            cfg.train.lambda_opa_mode = "frozen"
    if args.tau_min is not None:
        cfg.train.tau_min = args.tau_min
    if args.no_sh:
        cfg.train.no_sh = True
    for name in ("k", "image_size", "strength", "n_train", "n_test"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.synth, name, value)
    if getattr(args, "init_points", None) is not None:
        cfg.init_points = args.init_points
    cfg.validate()
    return cfg


def _options(cfg: RunConfig) -> SliceOptions:
    return cfg.train.slice_options()


def _write_json(path, obj):
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or "synth")
    spec = cfg.synth
    spec.background = tuple(cfg.background)
    ds = generate_synthetic(spec)
    save_dataset(out, ds)
    _write_json(out / "synth.json", asdict(spec))
    print(f"wrote {len(ds.train_cameras)} train + {len(ds.test_cameras)} test views and "
          f"{len(ds.scene)} ground-truth Gaussians to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out or "run")
    bg = np.asarray(cfg.background, float)
    cams, images = load_split(args.dataset, "train", bg)
    extent = scene_extent(cams)
    e = cfg.init_extent
    rng = np.random.default_rng(cfg.train.seed)
    init = random_cube_init(rng, cfg.init_points, [[-e] * 3, [e] * 3],
                            lambda_opa=cfg.train.lambda_opa, background=bg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    with atomic_path(out / "train.log") as tmp, open(tmp, "w") as stream:
        stream.write("iteration\tloss\tpsnr\tgaussians\n")
        try:
            result = train(init, cams, images, cfg.train, extent=extent, stream=stream)
        except TrainingDiverged as exc:
            stream.flush()
            save_scene(out / "checkpoint.ply", exc.checkpoint)
            raise
    save_scene(out / "scene.ply", result.scene)
    print(f"trained {cfg.train.iterations} iterations; {len(result.scene)} Gaussians -> "
          f"{out / 'scene.ply'}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    scene = load_scene(args.scene)
    cams, paths = load_cameras(args.cameras, args.width, args.height)
    out = Path(args.out or "renders")
    for cam, p in zip(cams, paths):
        rgb = render_view(scene, cam, _options(cfg), dilation=cfg.train.dilation).rgb
        write_image(out / Path(p).with_suffix(".png").name, rgb)
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


def evaluate(scene: Scene, cams, images, options: SliceOptions, repeats: int = 1,
             dilation: float = 0.3) -> dict:
    """Mean PSNR/SSIM, Gaussian count and mean render time over a view set."""
    ps, ss, times = [], [], []
    for cam, target in zip(cams, images):
        rgb = render_view(scene, cam, options, dilation=dilation).rgb
        for _ in range(repeats):
            t0 = time.perf_counter()
            render_view(scene, cam, options, dilation=dilation)
            times.append(time.perf_counter() - t0)
        ps.append(psnr(rgb, target))
        ss.append(ssim(rgb, target))
    ms = 1000.0 * float(np.mean(times)) if times else float("nan")
    return {"views": len(ps), "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
            "gaussians": len(scene), "render_ms": ms,
            "fps": 1000.0 / ms if ms > 0 else float("inf")}


def cmd_eval(args, cfg: RunConfig) -> int:
    scene = load_scene(args.scene)
    cams, images = load_split(args.dataset, args.split, scene.background)
    row = evaluate(scene, cams, images, _options(cfg), cfg.fps_repeats, cfg.train.dilation)
    header = f"{'split':<8}{'views':>6}{'PSNR':>10}{'SSIM':>9}{'points':>9}{'ms':>9}{'FPS':>9}"
    print(header)
    print(f"{args.split:<8}{row['views']:>6}{row['psnr']:>10.3f}{row['ssim']:>9.4f}"
          f"{row['gaussians']:>9}{row['render_ms']:>9.2f}{row['fps']:>9.1f}")
    if args.out:
        _write_json(args.out, row)
    return EXIT_OK


def cmd_slice(args, cfg: RunConfig) -> int:
    scene = load_scene(args.scene)
    d = np.asarray(args.direction, float)
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0:
        raise ValueError("--direction must be a finite non-zero vector")
    d = d / np.linalg.norm(d)
    sl = slice_scene(scene, np.broadcast_to(d, scene.mu_p.shape), _options(cfg),
                     want_scale_rotation=True)
    out = Path(args.out or "slice.ply")
    export_slice(out, sl.cg)
    print(f"exported {len(scene)} sliced Gaussians for direction {d.round(6).tolist()} to {out}")
    return EXIT_OK


def cmd_info(args, cfg: RunConfig) -> int:
    scene = load_scene(args.scene)
    n = len(scene)
    print(f"gaussians: {n}")
    print(f"background: {scene.background.tolist()}")
    print(f"bbox: {scene.bbox.tolist()}")
    if n:
        alpha = sigmoid(scene.raw_alpha)
        lam = sigmoid(scene.raw_lambda)
        sig = covariance(activate_cholesky(scene.raw_L))
        pd_norm = np.linalg.norm(sig[:, :3, 3:], axis=(1, 2))
        rows = [("alpha", alpha), ("lambda_opa", lam), ("|mu_d|", np.linalg.norm(scene.mu_d, axis=1)),
                ("|Sigma_pd|_F", pd_norm), ("|mu_p|", np.linalg.norm(scene.mu_p, axis=1))]
        for name, v in rows:
            print(f"{name:<14} min {v.min():.6g}  mean {v.mean():.6g}  max {v.max():.6g}")
    problems = scene.validate()
    print("invariants: " + ("ok" if not problems else "; ".join(problems)))
    return EXIT_OK if not problems else EXIT_VALIDATION


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "slice": cmd_slice, "info": cmd_info}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--lambda-opa", help="frozen value in [0, 1] or 'learnable'")
    common.add_argument("--tau-min", type=float)
    common.add_argument("--no-sh", action="store_true", help="optimize SH band 0 only")
    common.add_argument("--threads", type=int, help="worker threads for the rasterizer")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sixdgs", description="6D Gaussian splatting on CPU")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--k", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--strength", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", parents=[common], help="fit a scene to a dataset")
    p.add_argument("dataset")
    p.add_argument("--init-points", type=int)

    p = sub.add_parser("render", parents=[common], help="render a scene from a camera file")
    p.add_argument("scene")
    p.add_argument("cameras")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/count/timing table")
    p.add_argument("scene")
    p.add_argument("dataset")
    p.add_argument("--split", default="test")

    p = sub.add_parser("slice", parents=[common], help="export a 3DGS-compatible slice")
    p.add_argument("scene")
    p.add_argument("--direction", type=float, nargs=3, required=True, metavar=("DX", "DY", "DZ"))

    p = sub.add_parser("info", parents=[common], help="scene statistics and invariant check")
    p.add_argument("scene")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.threads is not None:
            import numba
            if args.threads < 1:
                raise ValueError("--threads must be >= 1")
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        return COMMANDS[args.command](args, cfg)
    except (SceneFileError, CameraFileError, ImageFileError, OSError) as exc:
        print(f"sixdgs {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, NonFiniteGradientError, NumericDegeneracyError,
            FloatingPointError) as exc:
        print(f"sixdgs {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, CameraError, ParameterDomainError) as exc:
        print(f"sixdgs {args.command}: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
