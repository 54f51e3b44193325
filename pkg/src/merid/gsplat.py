"""Minimal differentiable 3D Gaussian splatting: projection, compositing, loss and fitting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .camera import Camera
from .metrics import ssim_torch

logger = logging.getLogger(__name__)

NEAR = 0.01
BLUR = 0.3
ALPHA_SKIP = 1.0 / 255.0
DEFAULT_LAMBDA = 0.2
PIXEL_CHUNK = 16384
# keeps 1 / (1 - alpha) finite in the compositing backward
MAX_ALPHA = 0.9999


@dataclass
class Gaussian3D:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity_logit: float
    color: np.ndarray


class GaussianScene(nn.Module):
    def __init__(self, means, log_scales, quats, opacity_logits, colors, background=(0.0, 0.0, 0.0)):
        super().__init__()
        as_t = lambda x: torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
        means = as_t(means)
        dtype = means.dtype if means.is_floating_point() else torch.float32
        self.means = nn.Parameter(means.to(dtype).reshape(-1, 3).clone())
        self.log_scales = nn.Parameter(as_t(log_scales).to(dtype).reshape(-1, 3).clone())
        self.quats = nn.Parameter(as_t(quats).to(dtype).reshape(-1, 4).clone())
        self.opacity_logits = nn.Parameter(as_t(opacity_logits).to(dtype).reshape(-1).clone())
        self.colors = nn.Parameter(as_t(colors).to(dtype).reshape(-1, 3).clone())
        self.background = nn.Parameter(as_t(background).to(dtype).reshape(3).clone(), requires_grad=False)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D], background=(0.0, 0.0, 0.0), dtype=torch.float32):
        stack = lambda key: torch.as_tensor(np.stack([np.asarray(getattr(g, key), float) for g in gaussians]), dtype=dtype)
        return cls(stack("mean"), stack("log_scale"), stack("rotation"),
                   torch.tensor([g.opacity_logit for g in gaussians], dtype=dtype), stack("color"), background)

    def __len__(self):
        return self.means.shape[0]

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def rotation_matrices(self) -> torch.Tensor:
        q = self.quats / self.quats.norm(dim=-1, keepdim=True)
        w, x, y, z = q.unbind(-1)
        return torch.stack([
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ], dim=-1).reshape(-1, 3, 3)

    def covariances(self) -> torch.Tensor:
        rot = self.rotation_matrices()
        scale2 = torch.exp(2 * self.log_scales)
        return rot @ torch.diag_embed(scale2) @ rot.transpose(-1, -2)

    @torch.no_grad()
    def normalize_(self):
        """Renormalise quaternions and keep colours in [0, 1]; call after each optimiser step."""
        self.quats.div_(self.quats.norm(dim=-1, keepdim=True))
        self.colors.clamp_(0.0, 1.0)
        self.background.clamp_(0.0, 1.0)

    def check_finite(self):
        for name in ("means", "log_scales", "quats", "opacity_logits", "colors"):
            p = getattr(self, name).detach()
            bad = ~torch.isfinite(p.reshape(len(self), -1)).all(dim=1)
            if bad.any():
                idx = int(torch.nonzero(bad)[0])
                raise FloatingPointError(f"gaussian {idx} has a non-finite {name} value")

    def select(self, mask: torch.Tensor) -> "GaussianScene":
        return GaussianScene(self.means[mask].detach(), self.log_scales[mask].detach(), self.quats[mask].detach(),
                             self.opacity_logits[mask].detach(), self.colors[mask].detach(), self.background.detach())

    def cat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(*(torch.cat([getattr(self, k).detach(), getattr(other, k).detach()])
                               for k in ("means", "log_scales", "quats", "opacity_logits", "colors")),
                             background=self.background.detach())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: getattr(self, k).detach().cpu().numpy() for k in
               ("means", "log_scales", "quats", "opacity_logits", "colors")}
        out["background"] = self.background.detach().cpu().numpy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "GaussianScene":
        return cls(arrays["means"], arrays["log_scales"], arrays["quats"], arrays["opacity_logits"],
                   arrays["colors"], arrays["background"])


@dataclass
class Projection:
    mean2d: torch.Tensor   # (N, 2) pixels
    cov2d: torch.Tensor    # (N, 2, 2)
    depth: torch.Tensor    # (N,)
    visible: torch.Tensor  # (N,) bool; False = culled behind the near plane


def _camera_tensors(cam: Camera, dtype, device):
    rot = torch.as_tensor(cam.rotation, dtype=dtype, device=device)
    trans = torch.as_tensor(cam.translation, dtype=dtype, device=device)
    return rot, trans


def project(scene: GaussianScene, cam: Camera, near: float = NEAR, blur: float = BLUR) -> Projection:
    """EWA projection of every gaussian: ``cov2d = J W Σ Wᵀ Jᵀ + blur·I``."""
    rot, trans = _camera_tensors(cam, scene.means.dtype, scene.means.device)
    p = scene.means @ rot.T + trans
    depth = p[:, 2]
    visible = depth > near
    z = torch.where(visible, depth, torch.ones_like(depth))
    x, y = p[:, 0], p[:, 1]
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)
    zeros = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([cam.fx / z, zeros, -cam.fx * x / (z * z)], dim=-1),
        torch.stack([zeros, cam.fy / z, -cam.fy * y / (z * z)], dim=-1),
    ], dim=-2)
    cov_cam = rot @ scene.covariances() @ rot.T
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + blur * torch.eye(2, dtype=cov2d.dtype, device=cov2d.device)
    return Projection(mean2d, cov2d, depth, visible)


@dataclass
class RenderOutput:
    image: torch.Tensor  # (3, H, W)
    alpha: torch.Tensor  # (H, W)


def render(scene: GaussianScene, cam: Camera, near: float = NEAR, blur: float = BLUR,
           alpha_skip: float = ALPHA_SKIP) -> RenderOutput:
    """Front-to-back alpha compositing of all gaussians at every pixel centre."""
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    scene.check_finite()
    proj = project(scene, cam, near, blur)
    idx = torch.nonzero(proj.visible).squeeze(1)
    # global depth sort; stable so ties keep a fixed order
    idx = idx[torch.argsort(proj.depth[idx], stable=True)]
    dtype, device = scene.means.dtype, scene.means.device
    h, w = cam.height, cam.width
    bg = scene.background.to(dtype)
    if idx.numel() == 0:
        return RenderOutput(bg.view(3, 1, 1).expand(3, h, w).clone(), torch.zeros(h, w, dtype=dtype, device=device))

    mean2d = proj.mean2d[idx]
    cov = proj.cov2d[idx]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic_a = cov[:, 1, 1] / det
    conic_b = -cov[:, 0, 1] / det
    conic_c = cov[:, 0, 0] / det
    opacity = scene.opacities[idx]
    colors = scene.colors[idx]

    # exponent as a quadratic form in pixel coordinates: one matmul per chunk;
    # coordinates are centred on the image to limit cancellation in float32
    ou, ov = (w - 1) / 2, (h - 1) / 2
    mx, my = mean2d[:, 0] - ou, mean2d[:, 1] - ov
    coeff = -0.5 * torch.stack([
        conic_a, 2 * conic_b, conic_c,
        -2 * (conic_a * mx + conic_b * my), -2 * (conic_b * mx + conic_c * my),
        conic_a * mx * mx + 2 * conic_b * mx * my + conic_c * my * my,
    ])  # (6, N)

    vs, us = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    u, v = us.reshape(-1) - ou, vs.reshape(-1) - ov
    feats = torch.stack([u * u, u * v, v * v, u, v, torch.ones_like(u)], dim=-1)  # (P, 6)
    images, alphas = [], []
    for start in range(0, feats.shape[0], PIXEL_CHUNK):
        power = feats[start:start + PIXEL_CHUNK] @ coeff
        alpha = (opacity * torch.exp(power.clamp_max(0.0))).clamp_max(MAX_ALPHA)
        alpha = alpha * (alpha >= alpha_skip).to(dtype)
        image, final_t = _Composite.apply(alpha, colors, bg)
        images.append(image)
        alphas.append(1 - final_t)
    image = torch.cat(images).T.reshape(3, h, w)
    return RenderOutput(image, torch.cat(alphas).reshape(h, w))


class _Composite(torch.autograd.Function):
    """Front-to-back compositing of depth-sorted ``alpha`` (P, N) with an analytic backward.

    Transmittance is ``exp(cumsum(log(1 - alpha)))`` along the contiguous gaussian axis.
    """

    @staticmethod
    def forward(ctx, alpha, colors, bg):
        log_keep = torch.log1p(-alpha)
        cum = torch.cumsum(log_keep, dim=-1)
        trans = torch.exp(cum - log_keep)  # transmittance in front of each gaussian
        final_t = torch.exp(cum[:, -1])
        weights = alpha * trans
        image = weights @ colors + final_t[:, None] * bg[None, :]
        ctx.save_for_backward(alpha, trans, weights, colors, bg, final_t)
        return image, final_t

    @staticmethod
    def backward(ctx, grad_image, grad_final_t):
        alpha, trans, weights, colors, bg, final_t = ctx.saved_tensors
        q = grad_image @ colors.T  # (P, N): colour of each gaussian projected on the pixel gradient
        qw = q * weights
        behind = qw.sum(dim=-1, keepdim=True) - torch.cumsum(qw, dim=-1)
        tail = behind + (final_t * (grad_image @ bg))[:, None]
        if grad_final_t is not None:
            tail = tail + (grad_final_t * final_t)[:, None]
        grad_alpha = trans * q - tail / (1 - alpha)
        grad_colors = weights.T @ grad_image
        grad_bg = (final_t[:, None] * grad_image).sum(dim=0)
        return grad_alpha, grad_colors, grad_bg


def loss(rendered: torch.Tensor, target: torch.Tensor, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """``(1 - λ)·L1 + λ·(1 - SSIM)`` on ``(3, H, W)`` images."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    l1 = (rendered - target).abs().mean()
    if lam == 0.0:
        return l1
    return (1 - lam) * l1 + lam * (1 - ssim_torch(rendered, target))


def _nn_log_scale(means: torch.Tensor) -> torch.Tensor:
    n = means.shape[0]
    if n == 1:
        return torch.full((1, 3), math.log(0.1), dtype=means.dtype)
    dist = torch.cdist(means, means)
    dist.fill_diagonal_(float("inf"))
    k = min(3, n - 1)
    nn_dist = dist.topk(k, largest=False).values.mean(dim=1).clamp_min(1e-7)
    return torch.log(nn_dist)[:, None].expand(n, 3).clone()


def init_scene(mode: str, n: int = 0, seed: int = 0, bbox=None, points=None, colors=None,
               background=(0.0, 0.0, 0.0), dtype=torch.float32) -> GaussianScene:
    """Initial gaussians: uniform in ``bbox`` or placed at ``points``.

    Scales come from the mean distance to the three nearest neighbours, opacity
    starts at 0.1 and colours at mid-grey unless per-point colours are given.
    """
    if mode == "random_in_bbox":
        if n < 1:
            raise ValueError("n must be >= 1")
        if bbox is None:
            raise ValueError("random_in_bbox needs a bbox")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
        rng = np.random.default_rng(seed)
        pts = lo + rng.random((n, 3)) * (hi - lo)
        cols = np.full((n, 3), 0.5)
    elif mode == "from_points":
        if points is None or len(points) == 0:
            raise ValueError("from_points needs a non-empty point list")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cols = np.full((len(pts), 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    means = torch.as_tensor(pts, dtype=dtype)
    count = means.shape[0]
    quats = torch.zeros(count, 4, dtype=dtype)
    quats[:, 0] = 1
    opacity = torch.full((count,), math.log(0.1 / 0.9), dtype=dtype)
    return GaussianScene(means, _nn_log_scale(means), quats, opacity, torch.as_tensor(cols, dtype=dtype), background)


@dataclass
class OptimConfig:
    iters: int = 2000
    lam: float = DEFAULT_LAMBDA
    densify: bool = False
    densify_every: int = 200
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.01
    lr_means: float = 2e-3  # multiplied by the scene extent
    lr_scales: float = 1e-2
    lr_quats: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2e-2
    learn_background: bool = True
    seed: int = 0


def _make_optimizer(scene: GaussianScene, cfg: OptimConfig, extent: float):
    scene.background.requires_grad_(cfg.learn_background)
    extra = [{"params": [scene.background], "lr": cfg.lr_colors}] if cfg.learn_background else []
    return torch.optim.Adam(extra + [
        {"params": [scene.means], "lr": cfg.lr_means * extent},
        {"params": [scene.log_scales], "lr": cfg.lr_scales},
        {"params": [scene.quats], "lr": cfg.lr_quats},
        {"params": [scene.opacity_logits], "lr": cfg.lr_opacity},
        {"params": [scene.colors], "lr": cfg.lr_colors},
    ], eps=1e-15)


def _to_chw(image, dtype) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image, dtype=dtype)
    return t.permute(2, 0, 1) if t.shape[-1] == 3 and t.dim() == 3 else t


def optimize(scene: GaussianScene, views, cfg: OptimConfig | None = None, dump_path=None,
             history: list | None = None) -> GaussianScene:
    """Fit ``scene`` to ``(image, camera)`` pairs; returns the (possibly densified) scene."""
    cfg = cfg or OptimConfig()
    if len(views) < 2:
        raise ValueError("optimize needs at least two views")
    dtype = scene.means.dtype
    targets = [(_to_chw(img, dtype), cam) for img, cam in views]
    centers = np.stack([cam.center for _, cam in targets])
    extent = float(np.linalg.norm(centers - centers.mean(0), axis=1).max()) or 1.0
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(scene, cfg, extent)
    grad_accum = torch.zeros(len(scene), dtype=dtype)
    grad_count = torch.zeros(len(scene), dtype=dtype)

    for it in range(1, cfg.iters + 1):
        target, cam = targets[int(rng.integers(len(targets)))]
        out = render(scene, cam)
        value = loss(out.image, target, cfg.lam)
        if not torch.isfinite(value):
            if dump_path is not None:
                from .checkpoint import save_sections
                save_sections(dump_path, {"gaussians": scene.arrays()}, {"iteration": it})
            raise FloatingPointError(f"non-finite splatting loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        value.backward()
        if cfg.densify:
            g = scene.means.grad.detach().norm(dim=-1)
            grad_accum += g
            grad_count += (g > 0).to(dtype)
        opt.step()
        scene.normalize_()
        if history is not None:
            history.append(value.item())
        if cfg.densify and it % cfg.densify_every == 0 and it < cfg.iters:
            scene = densify_and_prune(scene, grad_accum / grad_count.clamp_min(1), cfg)
            opt = _make_optimizer(scene, cfg, extent)
            grad_accum = torch.zeros(len(scene), dtype=dtype)
            grad_count = torch.zeros(len(scene), dtype=dtype)
    return scene


def densify_and_prune(scene: GaussianScene, mean_grad: torch.Tensor, cfg: OptimConfig) -> GaussianScene:
    """Clone high-gradient gaussians, then drop nearly transparent ones."""
    with torch.no_grad():
        clone = mean_grad > cfg.densify_grad_threshold
        if clone.any():
            scene = scene.cat(scene.select(clone))
        keep = scene.opacities > cfg.prune_opacity
        if not keep.all() and keep.any():
            scene = scene.select(keep)
    logger.debug("densify: %d gaussians", len(scene))
    return scene
