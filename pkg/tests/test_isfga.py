import numpy as np
import pytest
import torch
import torch.nn as nn

from fdcheck import max_relative_error
from merid.isfga import (BandOperators, Enhancer, GatedAttention, ISFGAUNet, Modulation, UNetConfig, band_decompose,
                         gated_attention, modulate_values, unet_forward)


def reference_attention(x, module: GatedAttention):
    """Plain multi-head attention with the module's projections, via torch's own implementation."""
    c = module.channels
    ref = nn.MultiheadAttention(c, module.heads, batch_first=True, dtype=x.dtype)
    with torch.no_grad():
        ref.in_proj_weight.copy_(torch.cat([m.weight.view(c, c) for m in (module.w_q, module.w_k, module.w_v)]))
        ref.in_proj_bias.copy_(torch.cat([m.bias for m in (module.w_q, module.w_k, module.w_v)]))
        ref.out_proj.weight.copy_(module.w_out.weight.view(c, c))
        ref.out_proj.bias.copy_(module.w_out.bias)
    b, _, h, w = x.shape
    tokens = x.flatten(2).transpose(1, 2)
    out, _ = ref(tokens, tokens, tokens, need_weights=False)
    return out.transpose(1, 2).reshape(b, c, h, w)


def _saturate_gate(module: GatedAttention):
    with torch.no_grad():
        module.modulation.gate_proj.weight.zero_()
        module.modulation.gate_proj.bias.fill_(40.0)  # sigmoid(40) == 1 in floating point


def test_reduction_to_plain_attention():
    torch.manual_seed(0)
    m = GatedAttention(8, heads=4, state_channels=16)
    _saturate_gate(m)
    for i in range(20):
        x, state = torch.randn(1, 8, 8, 8), torch.randn(1, 16, 8, 8)
        assert (m(x, state) - reference_attention(x, m)).abs().max() < 1e-5


def test_scores_unchanged_by_modulation():
    torch.manual_seed(1)
    on = GatedAttention(8, heads=2, modulate=True, gate=True)
    off = GatedAttention(8, heads=2, modulate=False, gate=False)
    off.load_state_dict(on.state_dict())
    with torch.no_grad():
        for f in on.modulation.band_maps:
            f[-1].weight.normal_()
    x, state = torch.randn(2, 8, 6, 6), torch.randn(2, 16, 6, 6)
    out_on, a_on = on(x, state, return_scores=True)
    out_off, a_off = off(x, state, return_scores=True)
    assert torch.equal(a_on, a_off)
    assert not torch.allclose(out_on, out_off)


@pytest.mark.parametrize("window", [None, 4])
def test_attention_rows_are_distributions(window):
    torch.manual_seed(2)
    m = GatedAttention(8, heads=4, window=window)
    _, attn = m(torch.randn(2, 8, 10, 10), torch.randn(2, 16, 10, 10), return_scores=True)
    assert (attn.sum(-1) - 1).abs().max() < 1e-6
    assert (attn >= 0).all()


def test_window_padding_tokens_get_no_weight():
    torch.manual_seed(3)
    m = GatedAttention(8, heads=2, window=4)
    x = torch.randn(1, 8, 6, 6)
    _, attn = m(x, torch.randn(1, 16, 6, 6), return_scores=True)
    # the last window row/column covers padded pixels 6 and 7
    last = attn[-1, 0]  # window at rows 4..7, cols 4..7 -> tokens with r, c in {0, 1} are real
    real = torch.zeros(4, 4, dtype=torch.bool)
    real[:2, :2] = True
    assert last[:, ~real.flatten()].abs().max() == 0


def test_single_token():
    torch.manual_seed(4)
    m = GatedAttention(8, heads=2)
    x, state = torch.randn(1, 8, 1, 1), torch.randn(1, 16, 1, 1)
    v = m.w_v(x)
    expected = m.w_out(m.value_path(v, state))
    torch.testing.assert_close(m(x, state), expected)


def test_half_gate_halves_output():
    torch.manual_seed(5)
    m = GatedAttention(8, heads=4, modulate=True, gate=True)
    with torch.no_grad():
        m.modulation.gate_proj.weight.zero_()
        m.modulation.gate_proj.bias.zero_()  # sigmoid(0) = 0.5
    plain = GatedAttention(8, heads=4, modulate=False, gate=False)
    plain.load_state_dict(m.state_dict())
    x, state = torch.randn(1, 8, 5, 5), torch.randn(1, 16, 5, 5)
    bias = m.w_out.bias[:, None, None]
    torch.testing.assert_close(m(x, state) - bias, 0.5 * (plain(x, state) - bias), atol=1e-6, rtol=1e-6)


def test_memory_budget():
    m = GatedAttention(8, heads=4, memory_budget=1024)
    with pytest.raises(MemoryError, match="window"):
        m(torch.randn(1, 8, 16, 16), torch.randn(1, 16, 16, 16))


def test_heads_must_divide_channels():
    with pytest.raises(ValueError):
        GatedAttention(10, heads=4)


def test_band_identity_and_constant():
    ops = BandOperators(6)
    v = torch.randn(2, 6, 9, 9)
    for band in band_decompose(torch.full_like(v, 0.7), ops):
        assert (band - 0.7).abs().max() < 1e-6
    ops.set_identity()
    for band in band_decompose(v, ops):
        assert torch.equal(band, v)
    with pytest.raises(ValueError):
        band_decompose(torch.randn(1, 6, 5, 5), ops)
    with pytest.raises(ValueError):
        BandOperators(6, (3, 4))


def test_modulation_residual_and_cancel():
    mod = Modulation(4, heads=2, state_channels=16, bands=1)
    v, state = torch.randn(1, 4, 6, 6), torch.randn(1, 16, 6, 6)
    assert torch.equal(modulate_values(v, [v], state, mod), v)
    with torch.no_grad():
        mod.band_maps[0][-1].bias.fill_(-1.0)
    assert modulate_values(v, [v], state, mod).abs().max() == 0
    with pytest.raises(ValueError):
        modulate_values(v, [v], torch.randn(1, 16, 5, 6), mod)


def test_energy_statistic_is_group_mean():
    mod = Modulation(8, heads=4, state_channels=16, bands=1)
    band = torch.randn(2, 8, 5, 5)
    expected = band.reshape(2, 4, 2, 5, 5).mean(dim=(2, 3, 4))
    torch.testing.assert_close(mod.energy(band), expected)
    scalar = Modulation(8, heads=4, state_channels=16, bands=1, energy_mode="scalar")
    torch.testing.assert_close(scalar.energy(band)[:, 0], band.mean(dim=(1, 2, 3)))


def _randomised(module):
    torch.manual_seed(6)
    with torch.no_grad():
        for p in module.parameters():
            p.normal_(0, 0.5)
    return module


def test_modulate_values_gradients():
    mod = _randomised(Modulation(8, heads=4, state_channels=16, bands=3).double())
    ops = _randomised(BandOperators(8).double())
    v = torch.randn(1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
    state = torch.randn(1, 16, 8, 8, dtype=torch.float64)

    def f():
        return modulate_values(v, band_decompose(v, ops), state, mod).sum()

    params = [v, mod.phi.weight] + [p for f_b in mod.band_maps for p in f_b.parameters()]
    assert max_relative_error(f, params) < 1e-4


def test_gated_attention_gradients():
    m = _randomised(GatedAttention(8, heads=4, state_channels=16).double())
    x = torch.randn(1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
    state = torch.randn(1, 16, 8, 8, dtype=torch.float64)

    def f():
        return (gated_attention(x, state, m) ** 2).mean()

    params = [x, m.w_q.weight, m.w_k.weight, m.w_v.weight, m.modulation.phi.weight,
              m.modulation.gate_proj.weight, m.modulation.band_maps[0][0].weight, m.modulation.band_maps[2][-1].weight]
    assert max_relative_error(f, params) < 1e-4


def test_unet_identity_at_init_and_shapes():
    torch.manual_seed(7)
    net = ISFGAUNet(UNetConfig(widths=(8, 16, 16)), state_channels=16)
    for h, w in [(4, 4), (13, 21), (32, 32)]:
        low, refl = torch.rand(1, 3, h, w), torch.rand(1, 3, h, w)
        out = unet_forward(low, refl, torch.ones(1, 3, h, w), torch.randn(1, 16, h, w), net)
        assert out.shape == refl.shape
        assert torch.equal(out, refl)


def test_unet_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(scale_count=1, widths=(8,))
    with pytest.raises(ValueError):
        UNetConfig(widths=(32, 16, 64))


def test_enhancer_identity_configured_and_deterministic():
    torch.manual_seed(8)
    enh = Enhancer(UNetConfig(widths=(8, 16, 16))).eval()
    low = torch.rand(1, 3, 16, 16) * 0.2
    d = enh.decoupler(low)
    out, diag = enh(low)
    assert torch.equal(out, d.reflectance)
    assert diag.gain.shape == (1, 1, 16, 16) and diag.state_summary.shape == (1, 16)
    assert torch.equal(enh(low)[0], out)


def test_enhancer_debug_records_band_energy_and_gates():
    enh = Enhancer(UNetConfig(widths=(8, 16, 16)))
    enh.set_debug(True)
    _, diag = enh(torch.rand(1, 3, 16, 16))
    assert len(diag.attention) == len(enh.unet.attention_modules())
    assert all({"band_energy", "gate"} <= set(d) for d in diag.attention)
    g = diag.attention[0]["gate"]
    assert g.min() > 0 and g.max() < 1


def test_setting_one_has_no_decoupling():
    enh = Enhancer(UNetConfig(widths=(8, 16, 16)), erid=False, isfga=False)
    low = torch.rand(1, 3, 16, 16)
    out, diag = enh(low)
    assert torch.equal(out, low) and diag.gain is None
    assert all(not m.modulate and not m.use_gate for m in enh.unet.attention_modules())
