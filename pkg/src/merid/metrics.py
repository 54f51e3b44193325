"""Image quality metrics: PSNR, SSIM / D-SSIM, brightness curves and an external LPIPS hook."""
from __future__ import annotations

import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

PSNR_IDENTICAL = math.inf

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel SSIM over the valid (unpadded) region of ``(..., C, H, W)`` tensors."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-1]}x{a.shape[-2]} is smaller than the {window}x{window} window")
    squeeze = a.dim() == 3
    if squeeze:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    c = a.shape[1]
    g = gaussian_window(window, sigma, dtype=a.dtype).to(a.device)
    kx = g.view(1, 1, 1, window).expand(c, 1, 1, window)
    ky = g.view(1, 1, window, 1).expand(c, 1, window, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kx, groups=c), ky, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    out = num / den
    return out[0] if squeeze else out


def ssim_torch(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    return ssim_map(a, b, window, sigma).mean()


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """SSIM of two HxWx3 images with unit dynamic range."""
    ta = _as_tensor(a).to(torch.float64)
    tb = _as_tensor(b).to(torch.float64)
    if ta.dim() == 3 and ta.shape[-1] == 3:
        ta, tb = ta.permute(2, 0, 1), tb.permute(2, 0, 1)
    return float(ssim_torch(ta, tb, window, sigma))


def dssim(a, b) -> float:
    return 1.0 - ssim(a, b)


def brightness_curve(image, axis: str = "columns") -> np.ndarray:
    """Mean BT.601 luminance per image column (or per row with ``axis="rows"``)."""
    img = np.asarray(image, dtype=np.float64)
    y = img @ np.array([0.299, 0.587, 0.114])
    if axis == "columns":
        return y.mean(axis=0)
    if axis == "rows":
        return y.mean(axis=1)
    raise ValueError(f"axis must be 'columns' or 'rows', got {axis!r}")


@dataclass
class LpipsResult:
    value: float | None
    status: str = "ok"
    message: str = ""


def lpips_plugin(a, b, provider: str | None) -> LpipsResult:
    """Score an image pair with an external LPIPS command.

    ``provider`` is a shell-style command; the two image paths are appended and the
    command must print a single float.  ``None`` disables the metric.
    """
    if not provider:
        return LpipsResult(None, "disabled")
    from .data import write_image

    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for name, img in (("a.png", a), ("b.png", b)):
            if isinstance(img, (str, Path)):
                paths.append(str(img))
            else:
                p = Path(tmp) / name
                write_image(p, np.asarray(img))
                paths.append(str(p))
        try:
            proc = subprocess.run(shlex.split(provider) + paths, capture_output=True, text=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            return LpipsResult(None, "unavailable", str(exc))
    if proc.returncode != 0:
        return LpipsResult(None, "unavailable", proc.stderr.strip() or f"exit code {proc.returncode}")
    try:
        return LpipsResult(float(proc.stdout.strip().split()[-1]))
    except (ValueError, IndexError):
        return LpipsResult(None, "unavailable", f"unparseable provider output {proc.stdout!r}")


@dataclass
class ViewMetrics:
    view_id: str
    psnr: float
    ssim: float
    lpips: float | None = None

    def to_json(self) -> dict:
        return {"view": self.view_id, "psnr": _json_psnr(self.psnr), "ssim": self.ssim, "lpips": self.lpips}


def _json_psnr(value: float):
    return "identical" if math.isinf(value) else value


@dataclass
class MetricReport:
    per_view: list[ViewMetrics]
    brightness_curve: list[float] = field(default_factory=list)
    lpips_status: str = "disabled"
    lpips_message: str = ""

    @property
    def psnr(self) -> float:
        return float(np.mean([v.psnr for v in self.per_view]))

    @property
    def ssim(self) -> float:
        return float(np.mean([v.ssim for v in self.per_view]))

    @property
    def lpips(self) -> float | None:
        vals = [v.lpips for v in self.per_view]
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def to_json(self) -> dict:
        lp = {"status": self.lpips_status, "value": self.lpips}
        if self.lpips_message:
            lp["message"] = self.lpips_message
        return {
            "psnr": _json_psnr(self.psnr),
            "ssim": self.ssim,
            "lpips": lp,
            "per_view": [v.to_json() for v in self.per_view],
            "brightness_curve": [float(x) for x in self.brightness_curve],
        }


def evaluate_images(pairs, lpips_provider: str | None = None) -> MetricReport:
    """Metrics over ``(view_id, prediction, target)`` triples; aggregates are plain means."""
    per_view, status, message = [], "disabled", ""
    curve = None
    for view_id, pred, target in pairs:
        lp = lpips_plugin(pred, target, lpips_provider)
        if lp.status != "ok" and lpips_provider:
            status, message = lp.status, lp.message
        elif lp.status == "ok" and status == "disabled":
            status = "ok"
        per_view.append(ViewMetrics(view_id, psnr(pred, target), ssim(pred, target), lp.value))
        if curve is None:
            curve = brightness_curve(pred)
    return MetricReport(per_view, [] if curve is None else list(curve), status, message)
