"""Reflection head: a pointwise residual colour correction fitted per scene from a few views."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .isfga import Enhancer
from .metrics import MetricReport, evaluate_images
from .retinex import clamp_st, from_batch, to_batch

logger = logging.getLogger(__name__)


class ReflectionHead(nn.Module):
    """psi: 1x1 conv (3 -> hidden) -> GELU -> 1x1 conv (hidden -> 3), last layer zeroed."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.hidden = hidden
        self.fc1 = nn.Conv2d(3, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, 3, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def psi(self, r0: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(r0)))

    def forward(self, r0: torch.Tensor) -> torch.Tensor:
        return clamp_st(r0 + self.psi(r0))


def apply(r0: torch.Tensor, head: ReflectionHead) -> torch.Tensor:
    return head(r0)


@dataclass
class AdaptConfig:
    k_views: int = 10
    iters: int = 800
    step_size: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.k_views < 1:
            raise ValueError("iters and k_views must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@torch.no_grad()
def enhance_images(enhancer: Enhancer, images) -> list[torch.Tensor]:
    """Run a frozen enhancer over HxWx3 images; returns ``(1, 3, H, W)`` tensors."""
    was_training = enhancer.training
    enhancer.eval()
    dtype = next(enhancer.parameters()).dtype
    out = [enhancer(to_batch(img, dtype))[0] for img in images]
    enhancer.train(was_training)
    return out


def adapt(enhancer: Enhancer, head: ReflectionHead, pairs, cfg: AdaptConfig | None = None,
          r0_cache: list[torch.Tensor] | None = None, history: list | None = None) -> ReflectionHead:
    """Fit a copy of ``head`` to ``(low, normal)`` pairs with the enhancer frozen.

    Full-batch Adam on the mean L1 error, cosine-decayed over ``cfg.iters`` steps.
    ``r0_cache`` may hold precomputed enhancer outputs for the low images.
    """
    cfg = cfg or AdaptConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("adapt needs at least one (low, normal) pair")
    torch.manual_seed(cfg.seed)
    dtype = next(head.parameters()).dtype
    r0 = r0_cache if r0_cache is not None else enhance_images(enhancer, [low for low, _ in pairs])
    r0 = torch.cat([r.to(dtype) for r in r0])
    target = torch.cat([to_batch(normal, dtype) for _, normal in pairs])

    head = copy.deepcopy(head)
    head.train()
    opt = torch.optim.Adam(head.parameters(), lr=cfg.step_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iters)
    for it in range(1, cfg.iters + 1):
        value = (head(r0) - target).abs().mean()
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite adaptation loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        sched.step()
        if history is not None:
            history.append(value.item())
    head.eval()
    return head


def zero_shot_vs_adapted_report(enhancer: Enhancer, head: ReflectionHead, views,
                                lpips_provider: str | None = None) -> dict[str, MetricReport]:
    """Metrics with the head disabled and enabled over ``(view_id, low, normal)`` triples."""
    views = list(views)
    if not views:
        raise ValueError("no test views")
    if any(normal is None for _, _, normal in views):
        raise ValueError("zero-shot/adapted report needs ground-truth normal-light images")
    r0 = enhance_images(enhancer, [low for _, low, _ in views])
    with torch.no_grad():
        adapted = [head(r.to(next(head.parameters()).dtype)) for r in r0]
    zero = evaluate_images([(vid, np.clip(from_batch(r), 0, 1), normal)
                            for (vid, _, normal), r in zip(views, r0)], lpips_provider)
    ada = evaluate_images([(vid, np.clip(from_batch(r), 0, 1), normal)
                           for (vid, _, normal), r in zip(views, adapted)], lpips_provider)
    return {"zero_shot": zero, "adapted": ada}
