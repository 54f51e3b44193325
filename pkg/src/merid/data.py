"""Paired low/normal-light multi-view datasets: loading, COLMAP poses, splits, degradation."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera

logger = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
MIN_SIDE = 8

PREPROCESS_FRACTION = 0.75
TEST_FRACTION = 0.125
DEFAULT_FEWSHOT = 10
# full capture size of the real scenes and the working size they are reduced to (factor 8)
CAPTURE_RESOLUTION = (4032, 3024)
WORKING_RESOLUTION = (504, 378)


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    check_image(arr, name=str(path))
    return arr


def write_image(path, image: np.ndarray):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def check_image(image: np.ndarray, name: str = "image"):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name}: expected HxWx3 array, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"{name}: {w}x{h} is below the {MIN_SIDE}x{MIN_SIDE} minimum")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError(f"{name}: values outside [0, 1]")


def downsample(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-average resample to ``target = (width, height)``; never upsamples."""
    h, w = image.shape[:2]
    tw, th = target
    if tw > w or th > h:
        raise ValueError(f"downsample cannot upscale {w}x{h} to {tw}x{th}")
    if tw < 1 or th < 1:
        raise ValueError(f"invalid target size {tw}x{th}")
    img = np.asarray(image, dtype=np.float64)
    if h % th == 0 and w % tw == 0:
        fy, fx = h // th, w // tw
        out = img.reshape(th, fy, tw, fx, -1).mean(axis=(1, 3))
    else:
        ah, aw = _area_weights(h, th), _area_weights(w, tw)
        out = np.einsum("ih,hwc,jw->ijc", ah, img, aw)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    # row i averages source interval [i*s, (i+1)*s) with fractional overlaps
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights / scale


# ---------------------------------------------------------------------------
# manifests


@dataclass
class View:
    view_id: str
    low_path: str | None
    normal_path: str | None
    camera: Camera
    low_image: np.ndarray | None = field(default=None, repr=False)
    normal_image: np.ndarray | None = field(default=None, repr=False)

    def read_low(self) -> np.ndarray:
        if self.low_image is None:
            self.low_image = read_image(self.low_path)
        return self.low_image

    def read_normal(self) -> np.ndarray:
        if self.normal_image is None:
            self.normal_image = read_image(self.normal_path)
        return self.normal_image


@dataclass
class SceneManifest:
    scene_name: str
    views: list[View]
    resolution: tuple[int, int]
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None

    def __post_init__(self):
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate view ids in manifest")
        self.views = sorted(self.views, key=lambda v: v.view_id)

    @property
    def view_ids(self) -> list[str]:
        return [v.view_id for v in self.views]

    def view(self, view_id: str) -> View:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)

    def subset(self, view_ids) -> list[View]:
        wanted = set(view_ids)
        return [v for v in self.views if v.view_id in wanted]

    def scene_bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """Declared scene bounds, or a box around the centroid of the camera rig."""
        if self.bbox is not None:
            return np.asarray(self.bbox[0], float), np.asarray(self.bbox[1], float)
        centers = np.stack([v.camera.center for v in self.views])
        mid = centers.mean(axis=0)
        half = 0.5 * np.linalg.norm(centers - mid, axis=1).mean()
        return mid - half, mid + half

    def to_json(self, relative_to=None) -> dict:
        def rel(p):
            if p is None or relative_to is None:
                return p
            return os.path.relpath(p, relative_to)

        doc = {
            "scene": self.scene_name,
            "resolution": [int(self.resolution[0]), int(self.resolution[1])],
            "views": [
                {"id": v.view_id, "low": rel(v.low_path), "normal": rel(v.normal_path),
                 "camera": v.camera.to_dict()}
                for v in self.views
            ],
        }
        if self.bbox is not None:
            doc["bbox"] = [list(map(float, self.bbox[0])), list(map(float, self.bbox[1]))]
        return doc


def write_manifest_json(manifest: SceneManifest, path):
    path = Path(path)
    doc = manifest.to_json(relative_to=path.parent)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest_json(path) -> SceneManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    w, h = doc["resolution"]
    views = []
    for rec in doc["views"]:
        cam = Camera.from_dict(rec["camera"], w, h)
        views.append(View(rec["id"], str(path.parent / rec["low"]), str(path.parent / rec["normal"]), cam))
    bbox = doc.get("bbox")
    if bbox is not None:
        bbox = (tuple(bbox[0]), tuple(bbox[1]))
    return SceneManifest(doc["scene"], views, (int(w), int(h)), bbox)


def _list_images(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise FileNotFoundError(f"missing folder {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_manifest(root) -> SceneManifest:
    """Scan ``<root>/low``, ``<root>/normal`` and the COLMAP text export in ``<root>/colmap``.

    ``manifest.json`` takes precedence when present.
    """
    root = Path(root)
    if (root / "manifest.json").exists():
        manifest = read_manifest_json(root / "manifest.json")
        _check_readable(manifest)
        return manifest

    low = _list_images(root / "low")
    normal = _list_images(root / "normal")
    for name in sorted(set(low) ^ set(normal)):
        raise ValueError(f"unpaired view {name}")
    if not low:
        raise ValueError(f"no views found under {root}")

    cams = parse_colmap_text(root / "colmap" / "cameras.txt", root / "colmap" / "images.txt")
    by_stem = {Path(name).stem: cam for name, cam in cams.items()}
    if set(by_stem) != set(low):
        missing = sorted(set(low) - set(by_stem))
        extra = sorted(set(by_stem) - set(low))
        raise ValueError(
            f"images.txt lists {len(by_stem)} views but {len(low)} image pairs were found"
            f" (no pose for {missing}, pose without images for {extra})")

    views = [View(stem, str(low[stem]), str(normal[stem]), by_stem[stem]) for stem in sorted(low)]
    first = views[0].camera
    manifest = SceneManifest(root.name, views, (first.width, first.height))
    _check_readable(manifest)
    return manifest


def _check_readable(manifest: SceneManifest):
    w, h = manifest.resolution
    for v in manifest.views:
        for path in (v.low_path, v.normal_path):
            with Image.open(path) as im:
                if im.size != (w, h):
                    raise ValueError(f"{path}: size {im.size} differs from declared {w}x{h}")


# ---------------------------------------------------------------------------
# COLMAP text export

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


def _data_lines(path):
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line


def parse_colmap_text(cameras_file, images_file) -> dict[str, Camera]:
    intrinsics = {}
    for line in _data_lines(cameras_file):
        parts = line.split()
        cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
        if model == "PINHOLE":
            fx, fy, cx, cy = params[:4]
        elif model == "SIMPLE_PINHOLE":
            f, cx, cy = params[:3]
            fx = fy = f
        else:
            raise ValueError(f"unsupported camera model {model}")
        intrinsics[cam_id] = (fx, fy, cx, cy, w, h)

    cameras = {}
    # images.txt alternates pose lines with (possibly empty) 2D point lines
    with open(images_file) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    for i in range(0, len(lines), 2):
        parts = lines[i].split()
        if not parts:
            continue
        if len(parts) < 10:
            raise ValueError(f"{images_file}: malformed image line {lines[i]!r}")
        qvec = np.array([float(x) for x in parts[1:5]])
        tvec = np.array([float(x) for x in parts[5:8]])
        cam_id = int(parts[8])
        name = " ".join(parts[9:])
        norm = np.linalg.norm(qvec)
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"{name}: quaternion norm {norm:.6f} is not unit")
        if cam_id not in intrinsics:
            raise ValueError(f"{name}: unknown camera id {cam_id}")
        fx, fy, cx, cy, w, h = intrinsics[cam_id]
        cameras[name] = Camera.from_qvec(qvec / norm, tvec, fx, fy, cx, cy, w, h)
    return cameras


def write_colmap_text(cameras: dict[str, Camera], out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cam_lines, img_lines = ["# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]"], [
        "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME", "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for i, (name, cam) in enumerate(sorted(cameras.items()), start=1):
        intr = " ".join(repr(float(x)) for x in (cam.fx, cam.fy, cam.cx, cam.cy))
        cam_lines.append(f"{i} PINHOLE {cam.width} {cam.height} {intr}")
        pose = " ".join(repr(float(x)) for x in (*cam.qvec, *cam.translation))
        img_lines.append(f"{i} {pose} {i} {name}")
        img_lines.append("")
    (out_dir / "cameras.txt").write_text("\n".join(cam_lines) + "\n")
    (out_dir / "images.txt").write_text("\n".join(img_lines) + "\n")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    preprocess_train: tuple[str, ...]
    reconstruction: tuple[str, ...]
    test: tuple[str, ...]
    fewshot: tuple[str, ...] = ()

    @property
    def reconstruction_train(self) -> tuple[str, ...]:
        """Reconstruction views that are not held out for testing."""
        held = set(self.test)
        return tuple(v for v in self.reconstruction if v not in held)


def _spread(n: int, k: int) -> list[int]:
    # k indices evenly spread over range(n), each centred in its stride
    return [int((i + 0.5) * n / k) for i in range(k)]


def make_splits(manifest: SceneManifest, policy: str = "uniform", seed: int = 0) -> SplitSpec:
    """Uniformly spaced 75 / 25 split with half the reconstruction views held out for test.

    The uniform policy is seed-independent; ``seed`` is accepted so every policy shares
    one signature.
    """
    if policy != "uniform":
        raise ValueError(f"unknown split policy {policy!r}")
    ids = sorted(manifest.view_ids)
    n = len(ids)
    if n < 8:
        raise ValueError(f"need at least 8 views to split, got {n}")
    n_train = int(math.floor(PREPROCESS_FRACTION * n))
    n_rec = n - n_train
    n_test = int(math.floor(TEST_FRACTION * n))
    rec_idx = _spread(n, n_rec)
    rec = [ids[i] for i in rec_idx]
    train = [v for i, v in enumerate(ids) if i not in set(rec_idx)]
    test = [rec[i] for i in _spread(n_rec, n_test)]
    return SplitSpec(tuple(train), tuple(rec), tuple(test))


def sample_fewshot(split: SplitSpec, k: int = DEFAULT_FEWSHOT) -> list[str]:
    pool = sorted(split.preprocess_train)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(pool):
        raise ValueError(f"cannot sample {k} views from a {len(pool)}-view training split")
    return [pool[(i * len(pool)) // k] for i in range(k)]


# ---------------------------------------------------------------------------
# synthetic degradation


@dataclass
class DegradationSpec:
    gamma: float = 1.0
    attenuation: float = 1.0
    spatial_illum: np.ndarray | None = None
    noise_read: float = 0.0
    noise_shot: float = 0.0  # photons at unit intensity; 0 disables shot noise
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.attenuation <= 1:
            raise ValueError("attenuation must lie in (0, 1]")
        if self.noise_read < 0 or self.noise_shot < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.spatial_illum is not None:
            f = np.asarray(self.spatial_illum)
            if f.min() <= 0 or f.max() > 1:
                raise ValueError("spatial illumination must lie in (0, 1]")


def smooth_illumination(height: int, width: int, strength: float = 0.5, seed: int = 0) -> np.ndarray:
    """Low-frequency illumination field in ``[1 - strength, 1]``: a random tilt plus vignette."""
    rng = np.random.default_rng(seed)
    y, x = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    cx, cy = rng.uniform(-0.5, 0.5, size=2)
    tilt = 0.5 * (1 + np.cos(angle) * x + np.sin(angle) * y) / 2
    vignette = ((x - cx) ** 2 + (y - cy) ** 2) / 4.5
    field = np.clip(tilt + vignette, 0, 1)
    return 1.0 - strength * field


def apply_degradation(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    out = spec.attenuation * np.power(img, spec.gamma)
    if spec.spatial_illum is not None:
        out = out * np.asarray(spec.spatial_illum, dtype=np.float64)[..., None]
    rng = np.random.default_rng(spec.seed)
    if spec.noise_shot > 0:
        out = rng.poisson(out * spec.noise_shot) / spec.noise_shot
    if spec.noise_read > 0:
        out = out + rng.normal(0.0, spec.noise_read, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
