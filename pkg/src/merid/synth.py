"""Synthetic paired multi-view scenes rendered by an SDF sphere tracer.

The tracer shares nothing with the splatting renderer, so its images can serve as
ground truth for reconstruction tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import Camera, look_at
from .data import (DegradationSpec, SceneManifest, View, apply_degradation, downsample,
                   smooth_illumination, write_colmap_text, write_image, write_manifest_json)
from .gsplat import GaussianScene


@dataclass
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def surface_points(self, spacing: float):
        n = max(8, int(4 * np.pi * self.radius ** 2 / spacing ** 2))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)
        return np.asarray(self.center) + self.radius * dirs


@dataclass
class Box:
    center: tuple
    half_size: tuple
    color: tuple

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def surface_points(self, spacing: float):
        c, hs = np.asarray(self.center), np.asarray(self.half_size)
        pts = []
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            n0 = max(2, int(2 * hs[others[0]] / spacing))
            n1 = max(2, int(2 * hs[others[1]] / spacing))
            u, v = np.meshgrid(np.linspace(-1, 1, n0), np.linspace(-1, 1, n1), indexing="ij")
            for sign in (-1.0, 1.0):
                p = np.zeros((u.size, 3))
                p[:, axis] = sign
                p[:, others[0]] = u.ravel()
                p[:, others[1]] = v.ravel()
                pts.append(c + p * hs)
        return np.concatenate(pts)


@dataclass
class SceneSpec:
    """Primitives under one directional light; world y points down, as in image space."""

    primitives: list
    background: tuple = (0.25, 0.3, 0.4)
    light_dir: tuple = (-0.4, -1.0, -0.3)  # direction towards the light
    ambient: float = 0.35
    center: tuple = (0.0, 0.0, 0.0)
    ring_radius: float = 3.2
    ring_height: float = 1.2
    fov_deg: float = 50.0


def base_scene_spec() -> SceneSpec:
    return SceneSpec([
        Box((0.0, 0.55, 0.0), (1.4, 0.08, 1.4), (0.75, 0.7, 0.6)),
        Sphere((-0.45, 0.05, -0.2), 0.42, (0.9, 0.2, 0.15)),
        Box((0.5, 0.15, 0.3), (0.3, 0.32, 0.3), (0.2, 0.7, 0.3)),
        Sphere((0.25, 0.25, -0.6), 0.22, (0.2, 0.35, 0.9)),
    ])


def unseen_scene_spec() -> SceneSpec:
    return SceneSpec([
        Box((0.0, 0.55, 0.0), (1.4, 0.08, 1.4), (0.55, 0.6, 0.7)),
        Sphere((0.35, 0.0, 0.1), 0.45, (0.85, 0.75, 0.2)),
        Box((-0.5, 0.2, -0.3), (0.25, 0.27, 0.35), (0.7, 0.25, 0.7)),
        Sphere((-0.2, 0.3, 0.6), 0.2, (0.15, 0.75, 0.8)),
    ], background=(0.35, 0.28, 0.25), light_dir=(0.5, -1.0, 0.2))


def single_sphere_spec(color=(0.9, 0.1, 0.1)) -> SceneSpec:
    return SceneSpec([Sphere((0.0, 0.0, 0.0), 0.6, color)], background=(0.1, 0.1, 0.1))


@dataclass
class SyntheticDegradation:
    """Per-view low-light model: gamma, global attenuation, smooth field, Poisson-Gaussian noise."""

    gamma: float = 1.0
    attenuation: float = 0.12
    illum_strength: float = 0.4
    noise_read: float = 0.01
    noise_shot: float = 400.0

    def spec_for(self, view_index: int, seed: int, height: int, width: int) -> DegradationSpec:
        view_seed = seed * 100003 + view_index
        field_ = smooth_illumination(height, width, self.illum_strength, view_seed) if self.illum_strength else None
        return DegradationSpec(self.gamma, self.attenuation, field_, self.noise_read, self.noise_shot, view_seed)


def ring_cameras(spec: SceneSpec, n_views: int, width: int, height: int) -> list[Camera]:
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if spec.ring_radius <= 0:
        raise ValueError("degenerate camera placement: ring radius must be positive")
    f = 0.5 * width / np.tan(np.radians(spec.fov_deg) / 2)
    center = np.asarray(spec.center, dtype=np.float64)
    cams = []
    for i in range(n_views):
        theta = 2 * np.pi * i / n_views
        eye = center + np.array([spec.ring_radius * np.cos(theta), -spec.ring_height, spec.ring_radius * np.sin(theta)])
        rot, t = look_at(eye, center)
        cams.append(Camera(f, f, (width - 1) / 2, (height - 1) / 2, rot, t, width, height))
    return cams


def _scene_sdf(spec: SceneSpec, p):
    d = np.stack([prim.sdf(p) for prim in spec.primitives], axis=-1)
    return d.min(axis=-1), d.argmin(axis=-1)


def raymarch(spec: SceneSpec, cam: Camera, steps: int = 160, t_max: float = 20.0) -> np.ndarray:
    """Sphere-trace one HxWx3 lambertian image."""
    v, u = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ cam.rotation  # R^T d for row vectors
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = cam.center
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        dist, _ = _scene_sdf(spec, origin + t[idx, None] * dirs[idx])
        t[idx] += dist
        done = dist < 1e-4
        hit[idx[done]] = True
        active[idx[done | (t[idx] > t_max)]] = False

    image = np.tile(np.asarray(spec.background, dtype=np.float64), (len(dirs), 1))
    if hit.any():
        p = origin + t[hit, None] * dirs[hit]
        _, which = _scene_sdf(spec, p)
        eps = 1e-4
        normal = np.stack([
            _scene_sdf(spec, p + eps * e)[0] - _scene_sdf(spec, p - eps * e)[0] for e in np.eye(3)], axis=-1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True) + 1e-12
        light = np.asarray(spec.light_dir, dtype=np.float64)
        light /= np.linalg.norm(light)
        shade = spec.ambient + (1 - spec.ambient) * np.clip(normal @ light, 0.0, 1.0)
        colors = np.array([prim.color for prim in spec.primitives], dtype=np.float64)[which]
        image[hit] = colors * shade[:, None]
    return np.clip(image, 0.0, 1.0).reshape(cam.height, cam.width, 3)


def render_reference(spec: SceneSpec, cam: Camera, supersample: int = 2) -> np.ndarray:
    if supersample <= 1:
        return raymarch(spec, cam)
    s = supersample
    # sub-pixel grid whose block means sit on the target pixel centres
    hi = Camera(cam.fx * s, cam.fy * s, cam.cx * s + (s - 1) / 2, cam.cy * s + (s - 1) / 2,
                cam.rotation, cam.translation, cam.width * s, cam.height * s)
    return downsample(raymarch(spec, hi), (cam.width, cam.height))


def ground_truth_gaussians(spec: SceneSpec, spacing: float = 0.08, dtype=torch.float32) -> GaussianScene:
    pts, cols = [], []
    for prim in spec.primitives:
        p = prim.surface_points(spacing)
        pts.append(p)
        cols.append(np.tile(prim.color, (len(p), 1)))
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    n = len(pts)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1
    return GaussianScene(torch.as_tensor(pts, dtype=dtype), torch.full((n, 3), float(np.log(spacing / 2)), dtype=dtype),
                         torch.as_tensor(quats, dtype=dtype), torch.full((n,), float(np.log(0.9 / 0.1)), dtype=dtype),
                         torch.as_tensor(cols, dtype=dtype), spec.background)


def synth_scene(spec: SceneSpec, n_views: int, resolution=(64, 64), seed: int = 0,
                degradation: SyntheticDegradation | None = None, name: str = "synthetic",
                supersample: int = 2) -> tuple[SceneManifest, GaussianScene]:
    """Ring of ``n_views`` cameras with traced normal-light images and degraded low-light twins.

    Images live in memory on the returned views (``low_image`` / ``normal_image``);
    use :func:`write_scene` to lay them out on disk.
    """
    if n_views < 2:
        raise ValueError("synth_scene needs n_views >= 2")
    width, height = resolution
    degradation = degradation or SyntheticDegradation()
    views = []
    for i, cam in enumerate(ring_cameras(spec, n_views, width, height)):
        normal = render_reference(spec, cam, supersample).astype(np.float32)
        low = apply_degradation(normal, degradation.spec_for(i, seed, height, width))
        views.append(View(f"view_{i:03d}", None, None, cam, low_image=low, normal_image=normal))
    c = np.asarray(spec.center, dtype=np.float64)
    reach = 1.5
    bbox = (tuple(c - reach), tuple(c + reach))
    return SceneManifest(name, views, (width, height), bbox), ground_truth_gaussians(spec)


def write_scene(manifest: SceneManifest, out_dir) -> SceneManifest:
    """Write ``low/``, ``normal/``, ``colmap/`` and ``manifest.json``; returns the on-disk manifest."""
    out = Path(out_dir)
    (out / "low").mkdir(parents=True, exist_ok=True)
    (out / "normal").mkdir(parents=True, exist_ok=True)
    views = []
    for v in manifest.views:
        low_path, normal_path = out / "low" / f"{v.view_id}.png", out / "normal" / f"{v.view_id}.png"
        write_image(low_path, v.read_low())
        write_image(normal_path, v.read_normal())
        views.append(View(v.view_id, str(low_path), str(normal_path), v.camera))
    write_colmap_text({f"{v.view_id}.png": v.camera for v in views}, out / "colmap")
    written = SceneManifest(manifest.scene_name, views, manifest.resolution, manifest.bbox)
    write_manifest_json(written, out / "manifest.json")
    return written
