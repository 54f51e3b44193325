"""Luminance-space Retinex decoupling with a bounded, learnable gain field.

All tensors are ``(B, C, H, W)``.  Only ``log g`` is ever taken: the gain is bounded
below by ``g_min`` so no log of an image intensity is needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

G_MIN = 0.3
G_MAX = 6.0
LUMINANCE_EPS = 1e-4

# BT.601 analog YUV; chroma rows built as scaled (B - Y) and (R - Y) so greys carry no chroma
_LUMA = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)
_RGB2YUV = torch.stack([
    _LUMA,
    0.436 / (1 - 0.114) * (torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64) - _LUMA),
    0.615 / (1 - 0.299) * (torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64) - _LUMA),
])
_YUV2RGB = torch.linalg.inv(_RGB2YUV)


def to_batch(image, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 array (or tensor) -> (1, 3, H, W) tensor."""
    t = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    return t.to(dtype).permute(2, 0, 1).unsqueeze(0)


def from_batch(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].permute(1, 2, 0).cpu().numpy()


class _ClampST(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lo, hi, margin):
        ctx.save_for_backward(x)
        ctx.bounds = (lo - margin, hi + margin)
        return x.clamp(lo, hi)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        lo, hi = ctx.bounds
        return grad * ((x >= lo) & (x <= hi)).to(grad.dtype), None, None, None


def clamp_st(x: torch.Tensor, lo: float = 0.0, hi: float = 1.0, margin: float = 0.5) -> torch.Tensor:
    """Clamp whose gradient is 1 within ``margin`` outside the range, so saturated pixels still train."""
    return _ClampST.apply(x, lo, hi, margin)


def _mix(x: torch.Tensor, matrix: torch.Tensor) -> torch.Tensor:
    return torch.einsum("ij,bjhw->bihw", matrix.to(x.dtype).to(x.device), x)


def rgb_to_yuv(image: torch.Tensor) -> torch.Tensor:
    return _mix(image, _RGB2YUV)


def yuv_to_rgb(yuv: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    rgb = _mix(yuv, _YUV2RGB)
    return clamp_st(rgb) if clamp else rgb


def gaussian_kernel1d(radius: int, dtype=torch.float32) -> torch.Tensor:
    sigma = radius / 2.0
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return (k / k.sum()).to(dtype)


@dataclass
class LuminanceDecomposition:
    low: torch.Tensor   # L
    high: torch.Tensor  # H = Y - L


def decompose_luminance(y: torch.Tensor, radius: int = 7) -> LuminanceDecomposition:
    """Gaussian low-pass (sigma = radius / 2, edge replicate) and its residual."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if radius >= min(y.shape[-2:]):
        raise ValueError(f"radius {radius} too large for a {y.shape[-1]}x{y.shape[-2]} plane")
    k = gaussian_kernel1d(radius, y.dtype).to(y.device)
    padded = F.pad(y, (radius, radius, radius, radius), mode="replicate")
    low = F.conv2d(F.conv2d(padded, k.view(1, 1, 1, -1)), k.view(1, 1, -1, 1))
    return LuminanceDecomposition(low, y - low)


class GainNet(nn.Module):
    """f_theta: two 3x3 convolutions mapping (L, H) to a single pre-sigmoid plane."""

    def __init__(self, hidden: int = 16, g_min: float = G_MIN, g_max: float = G_MAX):
        super().__init__()
        if not 0 < g_min < g_max:
            raise ValueError("need 0 < g_min < g_max")
        self.g_min, self.g_max = g_min, g_max
        self.conv1 = nn.Conv2d(2, hidden, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1, padding_mode="replicate")

    def forward(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.gelu(self.conv1(torch.cat([low, high], dim=1))))

    @torch.no_grad()
    def set_constant(self, g: float):
        """Make the gain spatially constant: zero weights and the bias that yields ``g``."""
        frac = (g - self.g_min) / (self.g_max - self.g_min)
        if not 0 < frac < 1:
            raise ValueError(f"constant gain {g} outside the open interval ({self.g_min}, {self.g_max})")
        for p in self.parameters():
            p.zero_()
        self.conv2.bias.fill_(math.log(frac / (1 - frac)))


def compute_gain(decomp: LuminanceDecomposition, net: GainNet) -> torch.Tensor:
    if decomp.low.shape != decomp.high.shape:
        raise ValueError("L and H planes must share a shape")
    return net.g_min + torch.sigmoid(net(decomp.low, decomp.high)) * (net.g_max - net.g_min)


def reconstruct_reflectance(yuv: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    if gain.shape[-2:] != yuv.shape[-2:]:
        raise ValueError("gain field and image differ in size")
    return yuv_to_rgb(torch.cat([yuv[:, :1] * gain, yuv[:, 1:]], dim=1))


def luminance_map(reflectance: torch.Tensor, image: torch.Tensor, eps: float = LUMINANCE_EPS) -> torch.Tensor:
    return reflectance / image.clamp_min(eps)


class StateNet(nn.Module):
    """h_theta: 1x1 conv -> GELU -> 1x1 conv over [L, R' (3), log g]."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.channels = channels
        self.proj1 = nn.Conv2d(5, channels, 1)
        self.proj2 = nn.Conv2d(channels, channels, 1)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        return self.proj2(F.gelu(self.proj1(stack)))


def illumination_state(low: torch.Tensor, reflectance: torch.Tensor, gain: torch.Tensor, net: StateNet) -> torch.Tensor:
    if (gain <= 0).any():
        raise ValueError("gain must be strictly positive to take its log")
    return net(torch.cat([low, reflectance, torch.log(gain)], dim=1))


@dataclass
class Decoupling:
    yuv: torch.Tensor
    low: torch.Tensor
    high: torch.Tensor
    gain: torch.Tensor
    reflectance: torch.Tensor
    lum_map: torch.Tensor
    state: torch.Tensor


class RetinexDecoupler(nn.Module):
    def __init__(self, radius: int = 7, gain_hidden: int = 16, state_channels: int = 16,
                 g_min: float = G_MIN, g_max: float = G_MAX, eps: float = LUMINANCE_EPS):
        super().__init__()
        self.radius = radius
        self.eps = eps
        self.gain_net = GainNet(gain_hidden, g_min, g_max)
        self.state_net = StateNet(state_channels)

    @property
    def state_channels(self) -> int:
        return self.state_net.channels

    def forward(self, image: torch.Tensor) -> Decoupling:
        yuv = rgb_to_yuv(image)
        y = yuv[:, :1]
        # small crops: shrink the low-pass radius rather than fail
        radius = min(self.radius, min(y.shape[-2:]) - 1)
        decomp = decompose_luminance(y, radius)
        gain = compute_gain(decomp, self.gain_net)
        refl = reconstruct_reflectance(yuv, gain)
        lum = luminance_map(refl, image, self.eps)
        state = illumination_state(decomp.low, refl, gain, self.state_net)
        return Decoupling(yuv, decomp.low, decomp.high, gain, refl, lum, state)


def decouple(image: torch.Tensor, decoupler: RetinexDecoupler) -> Decoupling:
    return decoupler(image)
