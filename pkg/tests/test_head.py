import hashlib

import numpy as np
import pytest
import torch

from merid.head import AdaptConfig, ReflectionHead, adapt, apply, enhance_images, zero_shot_vs_adapted_report
from merid.isfga import Enhancer, UNetConfig
from merid.retinex import from_batch


def _enhancer():
    torch.manual_seed(0)
    return Enhancer(UNetConfig(widths=(8, 16, 16))).eval()


def _param_hash(module):
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


def test_identity_at_init():
    r0 = torch.rand(2, 3, 8, 8)
    assert torch.equal(apply(r0, ReflectionHead()), r0)


def test_parameter_count_and_pointwise():
    head = ReflectionHead()
    assert sum(p.numel() for p in head.parameters()) == 3 * 16 + 16 + 16 * 3 + 3 < 1000
    assert all(m.kernel_size == (1, 1) for m in head.modules() if isinstance(m, torch.nn.Conv2d))


def test_pointwise_commutes_with_permutation():
    torch.manual_seed(1)
    head = ReflectionHead()
    with torch.no_grad():
        for p in head.parameters():
            p.normal_(0, 0.3)
    r0 = torch.rand(1, 3, 6, 7)
    perm = torch.randperm(42)
    shuffled = r0.flatten(2)[..., perm].reshape(1, 3, 6, 7)
    assert torch.equal(head(shuffled).flatten(2), head(r0).flatten(2)[..., perm])
    same = torch.full((1, 3, 2, 2), 0.4)
    out = head(same)
    assert torch.equal(out[..., 0, 0], out[..., 1, 1])


def test_adapt_config_validation():
    assert (AdaptConfig().k_views, AdaptConfig().iters) == (10, 800)
    with pytest.raises(ValueError):
        AdaptConfig(iters=0)
    with pytest.raises(ValueError):
        AdaptConfig(k_views=0)
    with pytest.raises(ValueError):
        AdaptConfig(step_size=0)


def test_adapt_empty_pairs():
    with pytest.raises(ValueError):
        adapt(_enhancer(), ReflectionHead(), [])


def _pairs(enh, n=4, scale=(0.9, 0.85, 0.95), seed=0):
    rng = np.random.default_rng(seed)
    lows = [rng.random((16, 16, 3)).astype(np.float32) * 0.3 for _ in range(n)]
    r0 = enhance_images(enh, lows)
    targets = [np.clip(from_batch(r) * np.array(scale, dtype=np.float32), 0, 1) for r in r0]
    return list(zip(lows, targets)), r0


def test_adapt_recovers_channel_scale():
    enh = _enhancer()
    before = _param_hash(enh)
    pairs, r0 = _pairs(enh)
    head = ReflectionHead()
    adapted = adapt(enh, head, pairs, AdaptConfig(iters=800))
    assert _param_hash(enh) == before
    assert torch.equal(head.fc2.weight, torch.zeros_like(head.fc2.weight))  # input head untouched
    with torch.no_grad():
        err = max(np.abs(from_batch(adapted(r)) - t).max() for r, (_, t) in zip(r0, pairs))
    assert err < 0.02


def test_adapt_at_optimum_leaves_head_still():
    enh = _enhancer()
    pairs, _ = _pairs(enh, scale=(1, 1, 1))
    history = []
    adapted = adapt(enh, ReflectionHead(), pairs, AdaptConfig(iters=20), history=history)
    assert history[0] < 1e-6
    assert adapted.fc2.weight.abs().max() < 5e-2


def test_adapt_reports_non_finite_iteration():
    enh = _enhancer()
    pairs, _ = _pairs(enh, n=1)
    pairs = [(pairs[0][0], np.full_like(pairs[0][1], np.nan))]
    with pytest.raises(FloatingPointError, match="iteration 1"):
        adapt(enh, ReflectionHead(), pairs, AdaptConfig(iters=5))


def test_zero_shot_report():
    enh = _enhancer()
    pairs, _ = _pairs(enh, n=2)
    views = [(f"v{i}", low, normal) for i, (low, normal) in enumerate(pairs)]
    rep = zero_shot_vs_adapted_report(enh, ReflectionHead(), views)
    assert rep["zero_shot"].to_json() == rep["adapted"].to_json()
    adapted = adapt(enh, ReflectionHead(), pairs, AdaptConfig(iters=200))
    rep2 = zero_shot_vs_adapted_report(enh, adapted, views)
    assert rep2["adapted"].psnr >= rep2["zero_shot"].psnr
    assert rep2["adapted"].to_json() == zero_shot_vs_adapted_report(enh, adapted, views)["adapted"].to_json()
    with pytest.raises(ValueError):
        zero_shot_vs_adapted_report(enh, adapted, [("v", pairs[0][0], None)])
