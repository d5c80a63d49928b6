import pytest
import torch

from arvae.model import default_widths
from arvae.spatial_codec import SpatialDecoder, SpatialEncoder, decode_spatial, encode_spatial
from arvae.temporal_codec import (
    ImageFeatureExtractor,
    TemporalCodecConfig,
    TemporalDecoder,
    TemporalEncoder,
    decode_temporal,
    encode_temporal,
)


def small_cfg(n_down=3, c1=2, multi_scale=True, scale=0.25):
    w = default_widths(n_down, scale)
    return TemporalCodecConfig(n_down=n_down, c1=c1, motion_widths=w, image_widths=w, multi_scale=multi_scale)


def test_motion_pyramid_enc_levels():
    enc = TemporalEncoder(small_cfg(3))
    pyr = enc.motion_pyramid(torch.zeros(1, 2, 64, 64))
    assert [p.shape[-1] for p in pyr] == [64, 32, 16, 8]


def test_temporal_latent_full_scale_shape():
    cfg = small_cfg(3, c1=2)
    latent, _ = TemporalEncoder(cfg)(torch.zeros(1, 2, 256, 256), torch.rand(1, 3, 256, 256))
    assert latent.shape == (1, 2, 32, 32)


def test_zero_motion_is_finite():
    for n in (1, 2, 3):
        cfg = small_cfg(n)
        latent, prop = TemporalEncoder(cfg)(torch.zeros(2, 2, 32, 32), torch.rand(2, 3, 32, 32))
        assert torch.isfinite(latent).all()
        assert all(torch.isfinite(p).all() for p in prop)


def test_motion_pyramid_dec_levels_and_widths():
    cfg = small_cfg(3)
    dec = TemporalDecoder(cfg)
    pyr = dec.motion_pyramid(torch.zeros(1, 2, 32, 32))
    assert [p.shape[-1] for p in pyr] == [256, 128, 64, 32]
    assert [p.shape[1] for p in pyr] == list(cfg.motion_widths)


def test_encoder_decoder_pyramids_resolution_match():
    cfg = small_cfg(3)
    enc, dec = TemporalEncoder(cfg), TemporalDecoder(cfg)
    flow = torch.randn(1, 2, 64, 64)
    mp = enc.motion_pyramid(flow)
    latent = enc.to_latent(mp[-1])
    dp = dec.motion_pyramid(latent)
    assert [p.shape[-2:] for p in mp] == [p.shape[-2:] for p in dp]


@pytest.mark.parametrize("n_down", [3, 4, 5])
def test_image_pyramid_matches_motion_pyramid(n_down):
    cfg = small_cfg(n_down)
    size = 2 ** n_down * 2
    img = ImageFeatureExtractor(cfg)(torch.rand(1, 3, size, size))
    mot = TemporalEncoder(cfg).motion_pyramid(torch.zeros(1, 2, size, size))
    assert len(img) == n_down + 1
    assert [p.shape[-2:] for p in img] == [p.shape[-2:] for p in mot]


def test_zero_displacement_propagation_is_unwarped_fusion():
    cfg = small_cfg(2)
    dec = TemporalDecoder(cfg)  # displacement projections start at zero
    x = torch.rand(1, 3, 16, 16)
    prop = dec(torch.zeros(1, cfg.c1, 4, 4), x)  # zero flow channels in the latent
    # level 0 without warping is exactly the raw frame plus stem features
    img = dec.images(x)
    assert torch.allclose(prop[0], img[0], atol=1e-6)
    fused1 = dec.propagation.fuse["1"](torch.cat([img[1], dec.propagation.down["1"](img[0])], 1))
    assert torch.allclose(prop[1], fused1, atol=1e-6)


def test_propagated_shapes_follow_config():
    cfg = small_cfg(3)
    _, prop = TemporalEncoder(cfg)(torch.zeros(1, 2, 64, 64), torch.rand(1, 3, 64, 64))
    widths = cfg.propagated_widths()
    for i, p in enumerate(prop):
        assert p.shape == (1, widths[i], 64 >> i, 64 >> i)


def test_misaligned_pyramids_raise():
    cfg = small_cfg(2)
    enc = TemporalEncoder(cfg)
    mp = enc.motion_pyramid(torch.zeros(1, 2, 16, 16))
    ip = enc.images(torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError, match="misaligned"):
        enc.propagation(mp, ip)


@pytest.mark.parametrize("n_down,c1,c2", [(3, 2, 2), (4, 2, 14), (5, 2, 14)])
def test_encode_decode_temporal_shapes(n_down, c1, c2):
    cfg = small_cfg(n_down, c1)
    size = 64
    x_prev = torch.rand(1, 3, size, size)
    latent, p_e = encode_temporal(TemporalEncoder(cfg), torch.randn(1, 2, size, size), x_prev)
    assert latent.shape == (1, c1, size >> n_down, size >> n_down)
    assert latent.numel() == c1 * (size >> n_down) ** 2
    p_d = decode_temporal(TemporalDecoder(cfg), latent, x_prev)
    assert [p.shape for p in p_e] == [p.shape for p in p_d]


def test_temporal_modules_deterministic():
    cfg = small_cfg(2)
    enc = TemporalEncoder(cfg)
    flow, x = torch.randn(1, 2, 16, 16), torch.rand(1, 3, 16, 16)
    a, b = enc(flow, x), enc(flow, x)
    assert torch.equal(a[0], b[0])
    assert all(torch.equal(p, q) for p, q in zip(a[1], b[1]))


def test_decoder_latent_channel_mismatch():
    dec = TemporalDecoder(small_cfg(2, c1=2))
    with pytest.raises(ValueError):
        dec(torch.zeros(1, 3, 4, 4), torch.rand(1, 3, 16, 16))


def test_encoder_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        TemporalEncoder(small_cfg(3))(torch.zeros(1, 2, 20, 20), torch.rand(1, 3, 20, 20))


# -- spatial --------------------------------------------------------------


@pytest.mark.parametrize("n_down,c2", [(3, 2), (4, 14), (5, 14)])
def test_spatial_shapes(n_down, c2):
    cfg = small_cfg(n_down)
    size = 64
    x = torch.rand(2, 3, size, size)
    _, p = TemporalEncoder(cfg)(torch.zeros(2, 2, size, size), x)
    s = encode_spatial(SpatialEncoder(cfg, c2), p, x)
    assert s.shape == (2, c2, size >> n_down, size >> n_down)
    dec = SpatialDecoder(cfg, c2, state_channels=5)
    x_hat, g = decode_spatial(dec, s, p, dec.initial_state(x))
    assert x_hat.shape == (2, 3, size, size)
    assert g.shape == (2, 5, size, size)


def test_supplement_full_scale_shape_16x():
    cfg = small_cfg(4)
    x = torch.rand(1, 3, 256, 256)
    _, p = TemporalEncoder(cfg)(torch.zeros(1, 2, 256, 256), x)
    assert SpatialEncoder(cfg, 14)(p, x).shape == (1, 14, 16, 16)


def test_decoder_output_bounded_for_wild_latents():
    torch.manual_seed(0)
    cfg = small_cfg(2)
    dec = SpatialDecoder(cfg, 3, 4)
    for p in dec.parameters():
        torch.nn.init.normal_(p, std=0.5)
    x = torch.rand(1, 3, 16, 16)
    prop = TemporalDecoder(cfg)(torch.randn(1, cfg.c1, 4, 4) * 100, x)
    x_hat, g = dec(torch.randn(1, 3, 4, 4) * 1e3, prop, torch.randn(1, 4, 16, 16) * 10)
    assert torch.isfinite(x_hat).all() and torch.isfinite(g).all()
    x_hat = x_hat.detach()
    assert float(x_hat.min()) >= 0.0 and float(x_hat.max()) <= 1.0


def test_untrained_decoder_returns_warped_frame():
    cfg = small_cfg(2)
    x = torch.rand(1, 3, 16, 16) * 0.9 + 0.05
    prop = TemporalDecoder(cfg)(torch.zeros(1, cfg.c1, 4, 4), x)
    dec = SpatialDecoder(cfg, 2, 4)
    x_hat, _ = dec(torch.zeros(1, 2, 4, 4), prop, dec.initial_state(x))
    assert torch.allclose(x_hat, x, atol=1e-5)


def test_spatial_decoder_deterministic():
    cfg = small_cfg(2)
    x = torch.rand(1, 3, 16, 16)
    prop = TemporalDecoder(cfg)(torch.randn(1, cfg.c1, 4, 4), x)
    dec = SpatialDecoder(cfg, 2, 4)
    s, g = torch.randn(1, 2, 4, 4), torch.randn(1, 4, 16, 16)
    a, b = dec(s, prop, g), dec(s, prop, g)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_state_mismatch_raises():
    cfg = small_cfg(2)
    x = torch.rand(1, 3, 16, 16)
    prop = TemporalDecoder(cfg)(torch.randn(1, cfg.c1, 4, 4), x)
    dec = SpatialDecoder(cfg, 2, 4)
    with pytest.raises(ValueError, match="state"):
        dec(torch.randn(1, 2, 4, 4), prop, torch.zeros(1, 3, 16, 16))


def test_single_scale_switch_changes_parameters():
    multi, single = small_cfg(3), small_cfg(3, multi_scale=False)

    def count(cfg):
        mods = [TemporalEncoder(cfg), TemporalDecoder(cfg), SpatialEncoder(cfg, 2), SpatialDecoder(cfg, 2, 4)]
        return sum(p.numel() for m in mods for p in m.parameters())

    assert count(single) < count(multi)
    x = torch.rand(1, 3, 32, 32)
    latent, p = TemporalEncoder(single)(torch.zeros(1, 2, 32, 32), x)
    assert p[0] is None and p[-1] is not None
    s = SpatialEncoder(single, 2)(p, x)
    dec = SpatialDecoder(single, 2, 4)
    x_hat, _ = dec(s, TemporalDecoder(single)(latent, x), dec.initial_state(x))
    assert x_hat.shape == x.shape


# -- flow skip -----------------------------------------------------------------


def test_untrained_latent_is_pooled_motion():
    cfg = small_cfg(3, c1=3)
    flow = torch.randn(2, 2, 32, 32)
    latent, _ = TemporalEncoder(cfg)(flow, torch.rand(2, 3, 32, 32))
    pooled = torch.nn.functional.avg_pool2d(flow, 8) / 8
    assert torch.allclose(latent[:, :2], pooled, atol=1e-6)


def test_decoder_transports_latent_flow():
    cfg = small_cfg(2)
    x = torch.rand(1, 3, 32, 32)
    latent = torch.zeros(1, cfg.c1, 8, 8)
    latent[:, 0] = 0.75  # 3 px at full resolution
    prop, disps = TemporalDecoder(cfg)(latent, x, return_disp=True)
    assert torch.allclose(disps[0], torch.tensor([3.0, 0.0]).view(1, 2, 1, 1).expand(1, 2, 32, 32), atol=1e-6)
    assert torch.allclose(disps[2], latent[:, :2], atol=1e-6)
    # level 0 carries the raw frame shifted by the transported field
    assert torch.equal(prop[0][:, :3, :, :-3], x[:, :, :, 3:])


def test_encoder_and_decoder_share_base_displacement():
    cfg = small_cfg(2)
    flow = torch.randn(1, 2, 16, 16)
    x = torch.rand(1, 3, 16, 16)
    latent, _, enc_disp = TemporalEncoder(cfg)(flow, x, return_disp=True)
    _, dec_disp = TemporalDecoder(cfg)(latent, x, return_disp=True)
    for a, b in zip(enc_disp, dec_disp):
        assert torch.allclose(a, b, atol=1e-6)


def test_flow_skip_off_needs_no_channels():
    cfg = TemporalCodecConfig(n_down=2, c1=1, motion_widths=(4, 4, 4), image_widths=(4, 4, 4), flow_skip=False)
    latent, _ = TemporalEncoder(cfg)(torch.zeros(1, 2, 16, 16), torch.rand(1, 3, 16, 16))
    assert latent.shape == (1, 1, 4, 4)
    with pytest.raises(ValueError, match="flow_skip"):
        TemporalCodecConfig(n_down=2, c1=1, motion_widths=(4, 4, 4), image_widths=(4, 4, 4))
