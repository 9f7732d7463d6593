"""Scene, camera and image persistence.

Scenes are binary little-endian PLY files holding the raw (pre-activation)
parameters as float32 properties.  Cameras use the NeRF ``transforms.json``
layout (OpenGL camera-to-world matrices).  Images are 8-bit PNG.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyParseError
from scipy.spatial.transform import Rotation

from .camera import Camera, CameraError
from .gaussians import N_RAW_L, N_SH, Scene, logit
from .sh import rgb_to_dc
from .slicing import ConditionalGaussian3D

log = logging.getLogger(__name__)

FORMAT_TAG = "sixdgs-scene"
FORMAT_VERSION = 1

SCENE_PROPERTIES = (
    ["x", "y", "z", "dx", "dy", "dz"]
    + [f"l_{i}" for i in range(N_RAW_L)]
    + ["opacity"]
    + [f"sh_{i}" for i in range(3 * N_SH)]
    + ["lambda_opa"]
)

# OpenGL camera axes (x right, y up, z back) to OpenCV (x right, y down, z forward)
_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


class SceneFileError(ValueError):
    """Malformed, truncated or unsupported scene file."""


class CameraFileError(ValueError):
    pass


class ImageFileError(ValueError):
    pass


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling of ``path`` that replaces it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_ply(path, element: PlyElement, comments, obj_info=()):
    ply = PlyData([element], text=False, byte_order="<", comments=list(comments),
                  obj_info=list(obj_info))
    with atomic_path(path) as tmp:
        ply.write(str(tmp))


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------

def save_scene(path, scene: Scene):
    n = len(scene)
    packed = scene.pack().astype("<f4")
    rec = np.empty(n, dtype=[(name, "<f4") for name in SCENE_PROPERTIES])
    for j, name in enumerate(SCENE_PROPERTIES):
        rec[name] = packed[:, j]
    info = [
        "background " + " ".join(repr(float(v)) for v in scene.background),
        "bbox " + " ".join(repr(float(v)) for v in scene.bbox.reshape(-1)),
    ]
    _write_ply(path, PlyElement.describe(rec, "vertex"), [f"{FORMAT_TAG} {FORMAT_VERSION}"], info)


def _header_end(raw: bytes) -> int:
    marker = raw.find(b"end_header")
    if marker < 0:
        raise SceneFileError("missing end_header")
    nl = raw.find(b"\n", marker)
    if nl < 0:
        raise SceneFileError("unterminated header")
    return nl + 1


def _floats(line: str, key: str, count: int) -> np.ndarray:
    parts = line.split()
    if parts[0] != key or len(parts) != count + 1:
        raise SceneFileError(f"bad {key} record: {line!r}")
    return np.array([float(v) for v in parts[1:]])


def load_scene(path) -> Scene:
    """Read a scene file written by :func:`save_scene`; validates before returning."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneFileError(f"cannot read {path}: {exc}") from exc
    body_start = _header_end(raw)
    try:
        ply = PlyData.read(io.BytesIO(raw))
    except PlyElementParseError as exc:
        raise SceneFileError(f"count mismatch: body shorter than the header declares ({exc})") from exc
    except (PlyParseError, ValueError, UnicodeDecodeError) as exc:
        raise SceneFileError(f"malformed header: {exc}") from exc

    tags = [c.split() for c in ply.comments if c.startswith(FORMAT_TAG)]
    if not tags:
        raise SceneFileError("not a scene file (missing format tag)")
    if len(tags[0]) != 2 or tags[0][1] != str(FORMAT_VERSION):
        raise SceneFileError(f"unknown scene file version {' '.join(tags[0][1:])!r}")
    if ply.text or ply.byte_order != "<":
        raise SceneFileError("scene files must be binary little-endian")
    if [e.name for e in ply.elements] != ["vertex"]:
        raise SceneFileError("expected a single 'vertex' element")
    el = ply.elements[0]
    names = [p.name for p in el.properties]
    if names != SCENE_PROPERTIES:
        raise SceneFileError("property list does not match the format version")
    if any(p.val_dtype not in ("f4", "float32", "float") for p in el.properties):
        raise SceneFileError("all properties must be float32")

    n = el.count
    expected = n * len(SCENE_PROPERTIES) * 4
    actual = len(raw) - body_start
    if actual != expected:
        raise SceneFileError(f"count mismatch: header declares {n} records "
                             f"({expected} bytes) but the body has {actual} bytes")
    data = el.data
    packed = np.stack([np.asarray(data[name], dtype=np.float64) for name in SCENE_PROPERTIES],
                      axis=1) if n else np.zeros((0, len(SCENE_PROPERTIES)))

    background, bbox = np.zeros(3), None
    for line in ply.obj_info:
        if line.startswith("background"):
            background = _floats(line, "background", 3)
        elif line.startswith("bbox"):
            bbox = _floats(line, "bbox", 6).reshape(2, 3)
    scene = Scene.unpack(packed, background=background, bbox=bbox)
    _check_loaded(scene, path)
    return scene


def _check_loaded(scene: Scene, path):
    problems = scene.validate()
    # trained splats may drift past the margin; that is reported, not fatal
    fatal = [p for p in problems if "bbox" not in p]
    for p in problems:
        if p not in fatal:
            log.warning("%s: %s", path, p)
    if fatal:
        raise SceneFileError(f"{path}: " + "; ".join(fatal))


# --------------------------------------------------------------------------
# 3DGS-compatible slice export
# --------------------------------------------------------------------------

_GS_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)


def export_slice(path, cg: ConditionalGaussian3D, eps: float = 1e-7):
    """Write a sliced scene as a standard 3D Gaussian splatting point file.

    Colors go to the DC band through the inverse of the color activation;
    higher bands are zero.  ``cg`` must carry ``scale`` and ``rotation``.
    """
    if cg.scale is None or cg.rotation is None:
        raise ValueError("slice needs scale and rotation (want_scale_rotation=True)")
    n = len(cg.mu_cond)
    rec = np.zeros(n, dtype=[(name, "<f4") for name in _GS_PROPERTIES])
    for j, axis in enumerate("xyz"):
        rec[axis] = cg.mu_cond[:, j]
    dc = rgb_to_dc(np.clip(cg.color, eps, 1 - eps))
    for c in range(3):
        rec[f"f_dc_{c}"] = dc[:, c]
    rec["opacity"] = logit(np.clip(cg.alpha_cond, eps, 1 - eps))
    log_s = np.log(np.maximum(cg.scale, 1e-30))
    for j in range(3):
        rec[f"scale_{j}"] = log_s[:, j]
    if n:
        quat = Rotation.from_matrix(cg.rotation).as_quat()  # x, y, z, w
        for j, col in enumerate((3, 0, 1, 2)):
            rec[f"rot_{j}"] = quat[:, col]
    _write_ply(path, PlyElement.describe(rec, "vertex"), ["3dgs-compatible slice"])


def read_gs_ply(path) -> dict[str, np.ndarray]:
    """Read any vertex PLY into a name -> float64 column mapping."""
    try:
        ply = PlyData.read(str(path))
    except (OSError, PlyParseError, ValueError) as exc:
        raise SceneFileError(f"cannot read {path}: {exc}") from exc
    v = ply["vertex"].data
    return {name: np.asarray(v[name], dtype=np.float64) for name in v.dtype.names}


# --------------------------------------------------------------------------
# cameras
# --------------------------------------------------------------------------

def camera_from_c2w(c2w_gl, fov_x: float, width: int, height: int, tol: float = 1e-4) -> Camera:
    m = np.asarray(c2w_gl, dtype=np.float64)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        raise CameraFileError("transform_matrix must be a finite 4x4 matrix")
    rot_c2w = m[:3, :3] @ _GL_TO_CV
    if np.abs(rot_c2w.T @ rot_c2w - np.eye(3)).max() > tol or abs(np.linalg.det(rot_c2w) - 1) > tol:
        raise CameraFileError("transform is not rigid (rotation fails the orthonormality check)")
    # re-orthonormalize so the camera's own stricter check passes
    u, _, vt = np.linalg.svd(rot_c2w)
    rot_w2c = (u @ vt).T
    center = m[:3, 3]
    return Camera(fov_x, width, height, rot_w2c, -rot_w2c @ center)


def camera_to_c2w(cam: Camera) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = cam.rotation.T @ _GL_TO_CV
    m[:3, 3] = cam.center
    return m


def save_cameras(path, cameras, image_paths=None):
    cameras = list(cameras)
    if not cameras:
        raise CameraFileError("no cameras to save")
    first = cameras[0]
    if any((c.fov_x, c.width, c.height) != (first.fov_x, first.width, first.height) for c in cameras):
        raise CameraFileError("all cameras in one file must share intrinsics")
    image_paths = image_paths or [f"r_{i:03d}" for i in range(len(cameras))]
    doc = {
        "camera_angle_x": first.fov_x, "w": first.width, "h": first.height,
        "frames": [{"file_path": str(p), "transform_matrix": camera_to_c2w(c).tolist()}
                   for c, p in zip(cameras, image_paths)],
    }
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(doc, indent=2))


def _resolve_image(base: Path, file_path: str) -> Path:
    p = base / file_path
    return p if p.suffix else p.with_suffix(".png")


def load_cameras(path, width: int | None = None, height: int | None = None):
    """Parse a transforms file into ``(cameras, image_paths)``.

    Image size comes from ``w``/``h`` keys, the arguments, or the first image.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise CameraFileError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CameraFileError(f"{path}: invalid JSON: {exc}") from exc
    try:
        fov_x = float(doc["camera_angle_x"])
        frames = doc["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CameraFileError(f"{path}: missing camera_angle_x or frames") from exc
    paths = [_resolve_image(path.parent, f.get("file_path", "")) for f in frames]
    w = doc.get("w", width)
    h = doc.get("h", height)
    if (w is None or h is None) and paths:
        with PILImage.open(paths[0]) as im:
            w, h = im.size
    cams = []
    for i, f in enumerate(frames):
        try:
            cams.append(camera_from_c2w(f["transform_matrix"], fov_x, int(w), int(h)))
        except (KeyError, CameraError) as exc:
            raise CameraFileError(f"{path}: frame {i}: {exc}") from exc
        except CameraFileError as exc:
            raise CameraFileError(f"{path}: frame {i}: {exc}") from exc
    return cams, paths


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def quantize(rgb) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, rgb):
    arr = quantize(rgb)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ImageFileError(f"expected an (H, W, 3|4) image, got {arr.shape}")
    with atomic_path(path) as tmp:
        PILImage.fromarray(arr).save(tmp, format="PNG")


def read_image(path, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Float RGB image in [0, 1]; RGBA is composited over ``background``."""
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = "RGBA" if "A" in im.getbands() else "RGB"
            arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot decode {path}: {exc}") from exc
    if mode == "RGBA":
        a = arr[..., 3:]
        arr = arr[..., :3] * a + np.asarray(background, dtype=np.float64) * (1 - a)
    return arr


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def save_dataset(root, dataset):
    """Write a synthetic dataset: transforms files, 8-bit targets and the GT scene."""
    root = Path(root)
    for split, cams, images in (("train", dataset.train_cameras, dataset.train_images),
                                ("test", dataset.test_cameras, dataset.test_images)):
        names = [f"{split}/r_{i:03d}" for i in range(len(cams))]
        for name, img in zip(names, images):
            write_image(root / f"{name}.png", img)
        if cams:
            save_cameras(root / f"transforms_{split}.json", cams, names)
    save_scene(root / "gt_scene.ply", dataset.scene)


def load_split(root, split: str, background=(0.0, 0.0, 0.0)):
    cams, paths = load_cameras(Path(root) / f"transforms_{split}.json")
    images = [read_image(p, background) for p in paths]
    for cam, img in zip(cams, images):
        if img.shape[:2] != (cam.height, cam.width):
            raise ImageFileError(f"image size {img.shape[:2]} does not match camera "
                                 f"{(cam.height, cam.width)}")
    return cams, images


def focal_from_angle(angle_x: float, width: int) -> float:
    return width / (2.0 * math.tan(angle_x / 2.0))
