import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fd import check_input_grad, check_param_grads
from regmamba.backbone import (MSAA, Backbone, BackboneConfig, ChannelAggregation, Decoder, FeatureMap,
                               PatchEmbed, Stem, extract_features, gaussian_kernel1d,
                               msaa_split_sizes)


@pytest.fixture(autouse=True)
def double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def tiny(**kw) -> BackboneConfig:
    return BackboneConfig.tiny(d_state=2, expand=1, decoder_channels=8, **kw)


# config

@pytest.mark.parametrize("kw", [
    dict(stage_channels=[16, 32]),
    dict(stage_channels=[16, 30, 64]),
    dict(stage_channels=[32, 32, 64]),
    dict(patch_size=0),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BackboneConfig(**kw)


def test_config_padding_multiple():
    assert BackboneConfig().size_multiple == 16
    assert BackboneConfig(patch_size=2).size_multiple == 8


# stem / patch embed

def test_stem_shape():
    assert Stem(16)(torch.randn(2, 1, 64, 64)).shape == (2, 16, 64, 64)


def test_stem_zero_image():
    stem = Stem(4)
    torch.nn.init.zeros_(stem.conv.bias)
    assert torch.count_nonzero(stem(torch.zeros(1, 1, 9, 9))) == 0


def test_stem_rejects_small_image():
    with pytest.raises(ValueError):
        Stem(4)(torch.zeros(1, 1, 6, 10))


def test_stem_gradient():
    torch.manual_seed(0)
    stem = Stem(3)
    w = torch.randn(2, 3, 8, 8)
    assert check_input_grad(lambda x: (stem(x) * w).sum(), torch.randn(2, 1, 8, 8)) <= 1e-3


def test_patch_embed_default_channels():
    assert PatchEmbed(16, 96, 4)(torch.randn(1, 16, 64, 64)).shape == (1, 96, 16, 16)


def test_patch_embed_pointwise_identity():
    pe = PatchEmbed(5, 5, 1)
    with torch.no_grad():
        pe.proj.weight.copy_(torch.eye(5)[:, :, None, None])
        pe.proj.bias.zero_()
    x = torch.randn(1, 5, 7, 3)
    assert torch.equal(pe(x), x)


# MSAA / CA

@pytest.mark.parametrize("c,expected", [(64, (24, 32, 8)), (8, (3, 4, 1)), (96, (36, 48, 12))])
def test_msaa_split(c, expected):
    assert msaa_split_sizes(c) == expected


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64))
def test_msaa_split_exact(k):
    s = msaa_split_sizes(8 * k)
    assert sum(s) == 8 * k and s == (3 * k, 4 * k, k)


def test_msaa_split_rejects_non_multiple():
    with pytest.raises(ValueError):
        msaa_split_sizes(12)


@pytest.mark.parametrize("cls", [MSAA, ChannelAggregation])
def test_zero_residual_identity(cls):
    torch.manual_seed(0)
    m = cls(16)
    m.zero_residual()
    with torch.no_grad():
        for p in m.parameters():
            if p.dim() == 3:  # alpha / beta
                p.normal_()
    f = torch.randn(2, 16, 5, 5)
    assert torch.equal(m(f), f)


def test_msaa_gradient():
    torch.manual_seed(0)
    m = MSAA(16)
    with torch.no_grad():
        m.alpha.normal_()
    w = torch.randn(1, 16, 8, 8)
    assert check_input_grad(lambda x: (m(x) * w).sum(), torch.randn(1, 16, 8, 8)) <= 1e-3
    x = torch.randn(1, 16, 8, 8)
    assert check_param_grads(lambda: (m(x) * w).sum(), list(m.parameters())) <= 1e-3


def test_ca_gradient():
    torch.manual_seed(0)
    m = ChannelAggregation(64)
    with torch.no_grad():
        m.beta.normal_()
    w = torch.randn(2, 64, 4, 4)
    x = torch.randn(2, 64, 4, 4)
    assert check_input_grad(lambda v: (m(v) * w).sum(), x) <= 1e-3
    assert check_param_grads(lambda: (m(x) * w).sum(), list(m.parameters())) <= 1e-3


def test_ca_beta_zero_doubles_branch():
    torch.manual_seed(0)
    m = ChannelAggregation(8)
    f = torch.randn(1, 8, 4, 4)
    yb = F.gelu(m.dw3(m.inp(f)))
    assert torch.allclose(m(f), f + m.out(2 * yb), rtol=0, atol=1e-14)


def test_msaa_alpha_modulates_gap_residual():
    torch.manual_seed(0)
    m = MSAA(8)
    f = torch.randn(1, 8, 6, 6)
    base = m(f)
    with torch.no_grad():
        m.alpha.fill_(0.5)
    assert not torch.allclose(m(f), base)


# encoder / MFA / decoder

def test_encode_tiny_shapes():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig.tiny())
    levels = bb.encode(torch.randn(1, 1, 64, 64))
    assert len(levels) == 4
    assert [lv.shape[1:] for lv in levels] == [(16, 16, 16), (16, 16, 16), (32, 8, 8), (64, 4, 4)]
    assert [lv.level for lv in levels] == [0, 1, 2, 3]
    assert [lv.stride for lv in levels] == [4, 4, 8, 16]


def test_mfa_identity_when_residuals_zeroed():
    torch.manual_seed(0)
    bb = Backbone(tiny())
    for m in list(bb.msaa) + [bb.ca]:
        m.zero_residual()
    levels = bb.encode(torch.randn(1, 1, 32, 32))
    for z, lv in zip(bb.mfa(levels), levels):
        assert torch.equal(z, lv.data)


def test_mfa_composition():
    torch.manual_seed(0)
    bb = Backbone(tiny())
    levels = bb.encode(torch.randn(1, 1, 32, 32))
    z = bb.mfa(levels)
    assert [t.shape for t in z] == [lv.data.shape for lv in levels]
    for i in range(3):
        assert torch.equal(z[i], bb.msaa[i](levels[i].data))
    assert torch.equal(z[3], bb.ca(levels[3].data))


def test_mfa_wrong_level_count():
    bb = Backbone(tiny())
    with pytest.raises(ValueError):
        bb.mfa(bb.encode(torch.randn(1, 1, 32, 32))[:3])


def test_mfa_disabled_passthrough():
    bb = Backbone(tiny(use_mfa=False))
    levels = bb.encode(torch.randn(1, 1, 32, 32))
    assert all(z is lv.data for z, lv in zip(bb.mfa(levels), levels))


def test_decoder_output_shape_default_channels():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig.tiny())
    out = bb(torch.randn(1, 1, 64, 64))
    assert out.shape == (1, 64, 64, 64) and torch.isfinite(out).all()


def test_decoder_single_level_is_projection_and_upsample():
    dec = Decoder([16], 8)
    x = torch.randn(1, 16, 4, 4)
    expected = F.interpolate(dec.proj(x), size=(16, 16), mode="bilinear", align_corners=False)
    assert torch.equal(dec([x], (16, 16)), expected)


def test_decoder_rejects_inconsistent_pyramid():
    dec = Decoder([4, 8], 2)
    with pytest.raises(ValueError):
        dec([torch.randn(1, 4, 4, 4), torch.randn(1, 8, 8, 8)], (16, 16))
    with pytest.raises(ValueError):
        dec([torch.randn(1, 5, 4, 4), torch.randn(1, 8, 2, 2)], (16, 16))


def test_decoder_gradient():
    torch.manual_seed(0)
    dec = Decoder([4, 4, 8], 3)
    z = [torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8), torch.randn(1, 8, 4, 4)]
    w = torch.randn(1, 3, 16, 16)
    fn = lambda: (dec(z, (16, 16)) * w).sum()  # noqa: E731
    assert check_param_grads(fn, list(dec.parameters()) + z) <= 1e-3


def test_backbone_gradient_32px():
    torch.manual_seed(0)
    bb = Backbone(tiny())
    x = torch.randn(1, 1, 32, 32)
    w = torch.randn(1, 8, 32, 32)
    fn = lambda: (bb(x) * w).sum()  # noqa: E731
    assert check_param_grads(fn, list(bb.parameters()), n_dirs=2) <= 1e-3
    xr = x.clone().requires_grad_(True)
    assert check_param_grads(lambda: (bb(xr) * w).sum(), [xr], n_dirs=2) <= 1e-3


@pytest.mark.parametrize("hw", [(48, 48), (37, 50), (64, 64)])
def test_backbone_pads_and_crops(hw):
    bb = Backbone(tiny())
    assert bb(torch.randn(1, 1, *hw)).shape == (1, 8, *hw)


def test_backbone_deterministic():
    torch.manual_seed(0)
    bb = Backbone(tiny())
    x = torch.randn(1, 1, 32, 32)
    assert torch.equal(bb(x), bb(x))


# modality weights

def test_extract_features_modalities():
    torch.manual_seed(0)
    w = {"optical": Backbone(tiny()), "sar": Backbone(tiny())}
    x = torch.randn(1, 1, 32, 32)
    assert not torch.allclose(extract_features(w, x, "optical"), extract_features(w, x, "sar"))
    w["sar"].load_state_dict(w["optical"].state_dict())
    assert torch.equal(extract_features(w, x, "optical"), extract_features(w, x, "sar"))
    with pytest.raises(ValueError):
        extract_features(w, x, "lidar")


def test_feature_map_container():
    fm = FeatureMap(torch.zeros(1, 2, 3, 4), 1, 8)
    assert fm.shape == (1, 2, 3, 4)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_gaussian_kernel_normalized_symmetric(sigma):
    k = gaussian_kernel1d(sigma)
    assert k.numel() == 2 * max(1, math.ceil(3 * sigma)) + 1
    assert abs(k.sum().item() - 1) < 1e-15
    assert torch.equal(k, k.flip(0))


def test_prefilter_zero_is_identity():
    net = Backbone(BackboneConfig.tiny())
    x = torch.rand(2, 1, 20, 24)
    assert net.smooth(x) is x


def test_prefilter_matches_scipy():
    net = Backbone(BackboneConfig.tiny(input_sigma=1.0)).double()
    x = torch.rand(1, 1, 20, 23, dtype=torch.float64)
    ref = ndimage.gaussian_filter(x[0, 0].numpy(), 1.0, mode="mirror", truncate=3.0)
    assert abs(net.smooth(x)[0, 0].numpy() - ref).max() < 1e-14


def test_prefilter_preserves_constant_and_shape():
    net = Backbone(BackboneConfig.tiny(input_sigma=2.0)).double()
    x = torch.full((2, 1, 17, 19), 0.3, dtype=torch.float64)
    y = net.smooth(x)
    assert y.shape == x.shape and torch.allclose(y, x, atol=1e-15)


def test_prefilter_not_in_state_dict():
    assert "prefilter" not in Backbone(BackboneConfig.tiny(input_sigma=1.0)).state_dict()


def test_prefilter_rejects_tiny_image():
    net = Backbone(BackboneConfig.tiny(input_sigma=2.0))
    with pytest.raises(ValueError):
        net.smooth(torch.rand(1, 1, 5, 40))


def test_config_rejects_negative_sigma():
    with pytest.raises(ValueError):
        BackboneConfig.tiny(input_sigma=-0.1)
