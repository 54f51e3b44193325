"""Illumination-state-guided frequency-gated attention and the U-shaped enhancer around it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .retinex import RetinexDecoupler, clamp_st

# score matrices above this many bytes are refused rather than allocated
DEFAULT_MEMORY_BUDGET = 1 << 30
LUM_MAP_CAP = 12.0


class BandOperators(nn.Module):
    """Depthwise-separable convolutions, one per band, with increasing kernel sizes.

    Depthwise kernels start as box filters and pointwise mixes as the identity, so the
    bands begin as low-pass responses at different scales.
    """

    def __init__(self, channels: int, kernels=(3, 5, 7)):
        super().__init__()
        kernels = tuple(int(k) for k in kernels)
        if any(k % 2 == 0 for k in kernels) or list(kernels) != sorted(set(kernels)):
            raise ValueError(f"band kernels must be odd and strictly increasing, got {kernels}")
        self.kernels = kernels
        self.depthwise = nn.ModuleList(
            nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels, bias=False, padding_mode="replicate")
            for k in kernels)
        self.pointwise = nn.ModuleList(nn.Conv2d(channels, channels, 1, bias=False) for _ in kernels)
        with torch.no_grad():
            for dw, pw in zip(self.depthwise, self.pointwise):
                dw.weight.fill_(1.0 / dw.kernel_size[0] ** 2)
                pw.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))

    def __len__(self):
        return len(self.kernels)

    @torch.no_grad()
    def set_identity(self):
        for dw, pw in zip(self.depthwise, self.pointwise):
            dw.weight.zero_()
            k = dw.kernel_size[0]
            dw.weight[:, :, k // 2, k // 2] = 1.0
            c = pw.weight.shape[0]
            pw.weight.copy_(torch.eye(c, dtype=pw.weight.dtype).view(c, c, 1, 1))


def band_decompose(v: torch.Tensor, ops: BandOperators) -> list[torch.Tensor]:
    h, w = v.shape[-2:]
    if max(ops.kernels) > min(h, w):
        raise ValueError(f"band kernel {max(ops.kernels)} larger than the {w}x{h} feature map")
    return [pw(dw(v)) for dw, pw in zip(ops.depthwise, ops.pointwise)]


class Modulation(nn.Module):
    """Band-energy + illumination conditioned per-channel band weights, and the value gate.

    ``energy_mode="group"`` averages each band over head-dim and space, giving one
    statistic per head; ``"scalar"`` averages over everything.
    """

    def __init__(self, channels: int, heads: int, state_channels: int, bands: int,
                 cond_dim: int = 16, hidden: int = 32, energy_mode: str = "group"):
        super().__init__()
        if energy_mode not in ("group", "scalar"):
            raise ValueError(f"unknown energy mode {energy_mode!r}")
        self.heads = heads
        self.energy_mode = energy_mode
        n_energy = heads if energy_mode == "group" else 1
        self.phi = nn.Linear(state_channels, cond_dim)
        self.band_maps = nn.ModuleList(
            nn.Sequential(nn.Linear(n_energy + cond_dim, hidden), nn.GELU(), nn.Linear(hidden, channels))
            for _ in range(bands))
        for f in self.band_maps:
            nn.init.zeros_(f[-1].weight)
            nn.init.zeros_(f[-1].bias)
        self.gate_proj = nn.Conv2d(state_channels, channels, 1)

    def energy(self, band: torch.Tensor) -> torch.Tensor:
        b, c, h, w = band.shape
        if self.energy_mode == "scalar":
            return band.mean(dim=(1, 2, 3)).unsqueeze(1)
        return band.reshape(b, self.heads, c // self.heads, h, w).mean(dim=(2, 3, 4))

    def condition(self, state: torch.Tensor) -> torch.Tensor:
        return self.phi(state.mean(dim=(2, 3)))

    def gate(self, state: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate_proj(state))


def modulate_values(v: torch.Tensor, bands: list[torch.Tensor], state: torch.Tensor, params: Modulation,
                    debug: dict | None = None) -> torch.Tensor:
    """``V + Σ_b f_b(E[band_b], phi(state)) · band_b`` with coefficients broadcast over pixels."""
    if state.shape[-2:] != v.shape[-2:] or state.shape[0] != v.shape[0]:
        raise ValueError(f"state {tuple(state.shape)} not aligned with values {tuple(v.shape)}")
    if len(bands) != len(params.band_maps):
        raise ValueError(f"got {len(bands)} bands for {len(params.band_maps)} band mappings")
    cond = params.condition(state)
    out = v
    energies = []
    for band, f_b in zip(bands, params.band_maps):
        e = params.energy(band)
        energies.append(e.detach())
        coeff = f_b(torch.cat([e, cond], dim=1))
        out = out + coeff[:, :, None, None] * band
    if debug is not None:
        debug["band_energy"] = torch.stack(energies, dim=1)
    return out


def _windows(x: torch.Tensor, ws: int) -> torch.Tensor:
    # (B, C, H, W) -> (B * nW, C, ws*ws), H and W multiples of ws
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // ws, ws, w // ws, ws).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(-1, c, ws * ws)


def _unwindows(x: torch.Tensor, b: int, h: int, w: int, ws: int) -> torch.Tensor:
    c = x.shape[1]
    x = x.reshape(b, h // ws, w // ws, c, ws, ws).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, h, w)


class GatedAttention(nn.Module):
    """Multi-head attention over spatial tokens with a frequency-modulated, gated value path.

    ``modulate`` and ``gate`` switch the two value-path stages; with both off this is
    plain multi-head attention.  ``window`` restricts attention to non-overlapping
    ``window x window`` tiles.
    """

    def __init__(self, channels: int, heads: int = 4, state_channels: int = 16, band_kernels=(3, 5, 7),
                 window: int | None = None, modulate: bool = True, gate: bool = True,
                 energy_mode: str = "group", memory_budget: int = DEFAULT_MEMORY_BUDGET):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads = channels, heads
        self.head_dim = channels // heads
        self.window = window
        self.modulate, self.use_gate = modulate, gate
        self.memory_budget = memory_budget
        self.w_q = nn.Conv2d(channels, channels, 1)
        self.w_k = nn.Conv2d(channels, channels, 1)
        self.w_v = nn.Conv2d(channels, channels, 1)
        self.w_out = nn.Conv2d(channels, channels, 1)
        self.bands = BandOperators(channels, band_kernels)
        self.modulation = Modulation(channels, heads, state_channels, len(self.bands), energy_mode=energy_mode)
        self.debug = False
        self.last_debug: dict = {}

    def scores(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        # (N, C, T) -> (N, heads, T, T); rows are per-query distributions
        n, c, t = q.shape
        qh = q.reshape(n, self.heads, self.head_dim, t).transpose(-1, -2)
        kh = k.reshape(n, self.heads, self.head_dim, t)
        return torch.softmax(qh @ kh / math.sqrt(self.head_dim), dim=-1)

    def _bands_any_size(self, v: torch.Tensor) -> list[torch.Tensor]:
        # coarse scales of small inputs can be narrower than the widest band kernel
        h, w = v.shape[-2:]
        k = max(self.bands.kernels)
        if k <= min(h, w):
            return band_decompose(v, self.bands)
        ph, pw = max(0, k - h), max(0, k - w)
        bands = band_decompose(F.pad(v, (0, pw, 0, ph), mode="replicate"), self.bands)
        return [b[..., :h, :w] for b in bands]

    def value_path(self, v: torch.Tensor, state: torch.Tensor | None) -> torch.Tensor:
        dbg = {} if self.debug else None
        if self.modulate:
            v = modulate_values(v, self._bands_any_size(v), state, self.modulation, dbg)
        if self.use_gate:
            gate = self.modulation.gate(state)
            if dbg is not None:
                dbg["gate"] = gate.detach()
            v = v * gate
        if dbg is not None:
            self.last_debug = dbg
        return v

    def forward(self, x: torch.Tensor, state: torch.Tensor | None = None, return_scores: bool = False):
        b, c, h, w = x.shape
        if (self.modulate or self.use_gate) and state is None:
            raise ValueError("illumination state required when modulation or gating is enabled")
        q, k, v = self.w_q(x), self.w_k(x), self.w_v(x)
        v = self.value_path(v, state)

        ws = self.window
        if ws:
            ph, pw = (-h) % ws, (-w) % ws
            hp, wp = h + ph, w + pw
            mask = None
            if ph or pw:
                q, k, v = (F.pad(t, (0, pw, 0, ph)) for t in (q, k, v))
                valid = F.pad(torch.ones(1, 1, h, w, dtype=x.dtype, device=x.device), (0, pw, 0, ph))
                mask = _windows(valid.expand(b, 1, hp, wp), ws)[:, 0] > 0  # (N, T)
            qt, kt, vt = _windows(q, ws), _windows(k, ws), _windows(v, ws)
        else:
            hp, wp, mask = h, w, None
            qt, kt, vt = q.reshape(b, c, h * w), k.reshape(b, c, h * w), v.reshape(b, c, h * w)

        n, _, t = qt.shape
        need = n * self.heads * t * t * qt.element_size()
        if need > self.memory_budget:
            raise MemoryError(
                f"attention over {t} tokens needs {need / 2**20:.0f} MiB for scores; "
                "use windowed attention at this scale or fewer/lower-resolution inputs")

        if mask is None:
            attn = self.scores(qt, kt)
        else:
            qh = qt.reshape(n, self.heads, self.head_dim, t).transpose(-1, -2)
            kh = kt.reshape(n, self.heads, self.head_dim, t)
            logits = (qh @ kh) / math.sqrt(self.head_dim)
            logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
            attn = torch.softmax(logits, dim=-1)
        vh = vt.reshape(n, self.heads, self.head_dim, t).transpose(-1, -2)
        out = (attn @ vh).transpose(-1, -2).reshape(n, c, t)
        out = _unwindows(out, b, hp, wp, ws)[..., :h, :w] if ws else out.reshape(b, c, h, w)
        out = self.w_out(out)
        return (out, attn) if return_scores else out


def gated_attention(x, state, module: GatedAttention, return_scores: bool = False):
    return module(x, state, return_scores=return_scores)


# ---------------------------------------------------------------------------
# U-Net


@dataclass
class UNetConfig:
    scale_count: int = 3
    widths: tuple = (32, 64, 128)
    blocks_per_scale: int = 1
    band_kernels: tuple = (3, 5, 7)
    heads: int = 4
    window: int = 8
    windowed_scales: int = 1  # finest scales using windowed attention
    energy_mode: str = "group"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.band_kernels = tuple(int(k) for k in self.band_kernels)
        if self.scale_count < 2:
            raise ValueError("scale_count must be >= 2")
        if len(self.widths) != self.scale_count:
            raise ValueError(f"need {self.scale_count} widths, got {len(self.widths)}")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be non-decreasing with depth")


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.conv2(F.gelu(self.conv1(x)))


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, **attn_kwargs):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.attn = GatedAttention(channels, **attn_kwargs)

    def forward(self, x, state):
        return x + self.attn(self.norm(x), state)


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, blocks: int, **attn_kwargs):
        super().__init__()
        self.convs = nn.ModuleList(ConvBlock(cin if i == 0 else cout, cout) for i in range(blocks))
        self.attns = nn.ModuleList(AttentionBlock(cout, **attn_kwargs) for _ in range(blocks))

    def forward(self, x, state):
        for conv, attn in zip(self.convs, self.attns):
            x = attn(conv(x), state)
        return x


class ISFGAUNet(nn.Module):
    """Residual U-Net over [low, R', luminance map]; predicts a correction to R'."""

    in_channels = 9

    def __init__(self, config: UNetConfig | None = None, state_channels: int = 16,
                 modulate: bool = True, gate: bool = True):
        super().__init__()
        self.config = cfg = config or UNetConfig()
        self.state_channels = state_channels
        widths = cfg.widths

        def attn_kwargs(scale):
            return dict(heads=cfg.heads, state_channels=state_channels, band_kernels=cfg.band_kernels,
                        window=cfg.window if scale < cfg.windowed_scales else None,
                        modulate=modulate, gate=gate, energy_mode=cfg.energy_mode)

        self.in_conv = nn.Conv2d(self.in_channels, widths[0], 3, padding=1)
        self.encoders = nn.ModuleList(
            Stage(widths[s], widths[s], cfg.blocks_per_scale, **attn_kwargs(s)) for s in range(cfg.scale_count))
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[s], widths[s + 1], 3, stride=2, padding=1) for s in range(cfg.scale_count - 1))
        self.ups = nn.ModuleList(nn.Conv2d(widths[s + 1], widths[s], 1) for s in range(cfg.scale_count - 1))
        self.decoders = nn.ModuleList(
            Stage(2 * widths[s], widths[s], cfg.blocks_per_scale, **attn_kwargs(s)) for s in range(cfg.scale_count - 1))
        self.out_conv = nn.Conv2d(widths[0], 3, 3, padding=1)
        self.zero_residual_()

    @torch.no_grad()
    def zero_residual_(self):
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def attention_modules(self) -> list[GatedAttention]:
        return [m for m in self.modules() if isinstance(m, GatedAttention)]

    def forward(self, low, reflectance_init, lum_feature, state):
        h, w = low.shape[-2:]
        mult = 2 ** (self.config.scale_count - 1)
        ph, pw = (-h) % mult, (-w) % mult
        x = torch.cat([low, reflectance_init, lum_feature], dim=1)
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
            state = F.pad(state, (0, pw, 0, ph), mode=mode)

        states = [state]
        for _ in range(self.config.scale_count - 1):
            states.append(F.avg_pool2d(states[-1], 2))

        feats = []
        x = self.in_conv(x)
        for s, enc in enumerate(self.encoders):
            x = enc(x, states[s])
            if s < len(self.downs):
                feats.append(x)
                x = self.downs[s](x)
        for s in reversed(range(len(self.decoders))):
            x = self.ups[s](F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
            x = self.decoders[s](torch.cat([x, feats[s]], dim=1), states[s])
        residual = self.out_conv(x)[..., :h, :w]
        return clamp_st(reflectance_init + residual)


def unet_forward(low, reflectance_init, lum_map, state, net: ISFGAUNet):
    return net(low, reflectance_init, lum_map_feature(lum_map), state)


def lum_map_feature(lum_map: torch.Tensor) -> torch.Tensor:
    # the eps guard can push M to ~1e4 on black pixels; cap before feeding the network
    return lum_map.clamp(0.0, LUM_MAP_CAP) / LUM_MAP_CAP


# ---------------------------------------------------------------------------
# enhancer


@dataclass
class Diagnostics:
    gain: torch.Tensor | None = None
    lum_map: torch.Tensor | None = None
    state_summary: torch.Tensor | None = None  # per-channel mean of F_illu
    attention: list = field(default_factory=list)  # per-block {"band_energy", "gate"} when debugging


class Enhancer(nn.Module):
    """Retinex decoupling followed by the attention U-Net.

    ``erid=False`` bypasses decoupling (the U-Net sees the raw image with a unit
    luminance map and a zero state); ``isfga=False`` uses plain attention.
    """

    def __init__(self, unet_config: UNetConfig | None = None, radius: int = 7, gain_hidden: int = 16,
                 state_channels: int = 16, erid: bool = True, isfga: bool = True, g_min: float = 0.3,
                 g_max: float = 6.0, eps: float = 1e-4):
        super().__init__()
        self.erid, self.isfga = erid, isfga
        self.decoupler = RetinexDecoupler(radius, gain_hidden, state_channels, g_min, g_max, eps)
        self.unet = ISFGAUNet(unet_config, state_channels, modulate=isfga, gate=isfga)

    def set_debug(self, flag: bool):
        for m in self.unet.attention_modules():
            m.debug = flag

    def forward(self, low: torch.Tensor) -> tuple[torch.Tensor, Diagnostics]:
        if self.erid:
            d = self.decoupler(low)
            refl, lum, state = d.reflectance, d.lum_map, d.state
            diag = Diagnostics(d.gain, d.lum_map, d.state.mean(dim=(2, 3)))
        else:
            refl = low
            lum = torch.ones_like(low)
            b, _, h, w = low.shape
            state = low.new_zeros(b, self.decoupler.state_channels, h, w)
            diag = Diagnostics()
        out = unet_forward(low, refl, lum, state, self.unet)
        diag.attention = [m.last_debug for m in self.unet.attention_modules() if m.debug]
        return out, diag


def enhance(low: torch.Tensor, enhancer: Enhancer) -> tuple[torch.Tensor, Diagnostics]:
    return enhancer(low)
