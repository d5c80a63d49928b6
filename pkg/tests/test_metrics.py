import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from arvae.metrics import (
    DECOUPLED,
    PSNR_CAP,
    entropy_report,
    histogram,
    psnr,
    shannon_entropy,
    ssim,
    ssim_map,
    ssim_per_frame,
)
from arvae.model import ARVAE, desk_config
from arvae.video_io import synthetic_dataset


# -- PSNR ----------------------------------------------------------------------


def test_psnr_half_vs_quarter():
    x = torch.full((2, 3, 8, 8), 0.5)
    y = torch.full((2, 3, 8, 8), 0.25)
    per, mean = psnr(x, y)
    assert mean == pytest.approx(10 * math.log10(1 / 0.0625), abs=1e-9)
    assert mean == pytest.approx(12.0412, abs=1e-4)
    assert per.shape == (2,)


def test_psnr_identical_is_capped():
    x = torch.rand(3, 3, 8, 8)
    per, mean = psnr(x, x)
    assert torch.all(per == PSNR_CAP) and mean == PSNR_CAP


def test_psnr_mean_is_average_of_frames():
    g = torch.Generator().manual_seed(0)
    x, y = torch.rand(4, 5, 3, 8, 8, generator=g), torch.rand(4, 5, 3, 8, 8, generator=g)
    per, mean = psnr(x, y)
    assert per.shape == (5,)
    assert mean == pytest.approx(float(per.mean()), abs=1e-12)
    # batch averaging: per-frame value is the mean of per-clip values
    clip0, _ = psnr(x[0], y[0])
    manual = 10 * torch.log10(1 / ((x[0, 2].double() - y[0, 2].double()) ** 2).mean())
    assert float(clip0[2]) == pytest.approx(float(manual), abs=1e-9)


# -- SSIM ----------------------------------------------------------------------


def test_ssim_identity():
    x = torch.rand(2, 3, 32, 32)
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-6)


def test_ssim_symmetric():
    g = torch.Generator().manual_seed(1)
    x, y = torch.rand(2, 3, 24, 24, generator=g), torch.rand(2, 3, 24, 24, generator=g)
    assert abs(float(ssim(x, y)) - float(ssim(y, x))) < 1e-6


def _per_window_ssim(x: np.ndarray, y: np.ndarray, size=11, sigma=1.5) -> np.ndarray:
    """Direct weighted statistics for each valid window position (single channel)."""
    ax = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    h, wd = x.shape
    out = np.empty((h - size + 1, wd - size + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            a, b = x[i : i + size, j : j + size], y[i : i + size, j : j + size]
            ma, mb = (w * a).sum(), (w * b).sum()
            va, vb = (w * (a - ma) ** 2).sum(), (w * (b - mb) ** 2).sum()
            cov = (w * (a - ma) * (b - mb)).sum()
            out[i, j] = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return out


def test_checkerboard_inverse_strongly_negative():
    yy, xx = np.mgrid[:16, :16]
    board = ((yy + xx) % 2).astype(np.float64)
    inv = 1.0 - board
    oracle = _per_window_ssim(board, inv)
    got = ssim_map(torch.from_numpy(board)[None, None], torch.from_numpy(inv)[None, None])[0, 0].numpy()
    np.testing.assert_allclose(got, oracle, atol=1e-9)
    assert got.mean() < -0.9


def test_ssim_matches_per_window_oracle_random():
    rng = np.random.default_rng(5)
    x = rng.random((14, 15))
    y = np.clip(x + 0.2 * rng.standard_normal((14, 15)), 0, 1)
    got = ssim_map(torch.from_numpy(x)[None, None], torch.from_numpy(y)[None, None])[0, 0].numpy()
    np.testing.assert_allclose(got, _per_window_ssim(x, y), atol=1e-9)


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(7)
    x = rng.random((40, 36, 3))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    ref = metrics.structural_similarity(x, y, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                        sigma=1.5, use_sample_covariance=False)
    got = float(ssim(torch.from_numpy(x).permute(2, 0, 1)[None], torch.from_numpy(y).permute(2, 0, 1)[None]))
    assert got == pytest.approx(ref, abs=1e-6)


def test_ssim_per_frame_shape_and_mean():
    g = torch.Generator().manual_seed(3)
    x, y = torch.rand(2, 4, 3, 16, 16, generator=g), torch.rand(2, 4, 3, 16, 16, generator=g)
    per = ssim_per_frame(x, y)
    assert per.shape == (4,)
    assert float(per.mean()) == pytest.approx(float(ssim(x, y)), abs=1e-6)


def test_ssim_small_frames_shrink_window():
    x = torch.rand(1, 3, 6, 6)
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-6)


# -- entropy -------------------------------------------------------------------


def test_constant_tensor_zero_bits():
    assert shannon_entropy(torch.full((1000,), 0.3)) == 0.0


def test_exactly_uniform_occupancy_eight_bits():
    v = (np.arange(256 * 4) % 256 + 0.5) / 256
    assert shannon_entropy(v) == pytest.approx(8.0, abs=1e-12)


def test_iid_uniform_law_of_large_numbers():
    v = np.random.default_rng(0).random(10**6)
    assert shannon_entropy(v) == pytest.approx(8.0, abs=0.01)


def test_outliers_clamp_into_end_bins():
    counts = histogram(np.array([-5.0, 0.0, 0.999, 7.0]), 4, (0.0, 1.0))
    assert counts.tolist() == [2, 0, 0, 2]


def test_bad_inputs():
    with pytest.raises(ValueError):
        shannon_entropy(np.zeros(3), bins=1)
    with pytest.raises(ValueError):
        shannon_entropy(np.array([np.nan]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_entropy_invariant_under_bin_relabeling(seed):
    rng = np.random.default_rng(seed)
    bins = 16
    idx = rng.integers(0, bins, size=500)
    perm = rng.permutation(bins)
    centres = (np.arange(bins) + 0.5) / bins
    a = shannon_entropy(centres[idx], bins)
    b = shannon_entropy(centres[perm[idx]], bins)
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_entropy_monotone_in_bins(seed, k):
    v = np.random.default_rng(seed).beta(2, 5, size=2000)
    coarse, fine = 2**k, 2 ** (k + 1)
    assert shannon_entropy(v, coarse) <= shannon_entropy(v, fine) + 1e-12


# -- entropy report ----------------------------------------------------------------


def _static_clips(n=3, t=4, size=32):
    g = torch.Generator().manual_seed(0)
    return [torch.rand(1, 3, size, size, generator=g).expand(t, -1, -1, -1).contiguous() for _ in range(n)]


def test_static_video_with_zero_flows():
    clips = _static_clips()
    flows = [[torch.zeros(2, 32, 32)] * 3 for _ in clips]
    rep = entropy_report(None, clips, flows)
    assert rep["raw_frames"].bits_per_element > 1.0
    for name in ("motion_field", "motion_downsampled", "residual"):
        assert rep[name].bits_per_element <= 0.05


def test_static_video_with_untrained_model():
    model = ARVAE(desk_config(first_frame_mode="passthrough"))
    rep = entropy_report(model, _static_clips(2, 3))
    assert rep["motion_downsampled"].bits_per_element <= 0.05
    assert rep["residual"].bits_per_element <= 0.05
    assert rep["raw_frames"].bits_per_element > 1.0


def test_translation_set_decoupled_cheaper_than_raw():
    data = synthetic_dataset(6, seed=4, canvas=(64, 64), length=5)
    rep = entropy_report(None, [s.clip.frames for s in data], [s.flows for s in data])
    pooled = rep.combined(DECOUPLED)
    assert pooled.bits_per_element <= 0.7 * rep["raw_frames"].bits_per_element


def test_report_element_counts_follow_config():
    cfg = desk_config(first_frame_mode="passthrough")
    model = ARVAE(cfg)
    clips = [torch.rand(3, 3, 64, 64)]
    rep = entropy_report(model, clips)
    r = cfg.ratio
    assert rep["raw_frames"].element_count == 3 * 64 * 64
    assert rep["residual"].element_count == 3 * 64 * 64
    assert rep["motion_downsampled"].element_count == 2 * (64 // r) ** 2
    assert rep["temporal_latent"].element_count == cfg.c1 * (64 // r) ** 2
    assert rep["spatial_supplement"].element_count == cfg.c2 * (64 // r) ** 2
    assert rep.frames == 2
    for e in rep.entries:
        assert 0.0 <= e.bits_per_element <= 8.0
        assert e.bits_total == pytest.approx(e.bits_per_element * e.element_count)


def test_report_serialises():
    rep = entropy_report(None, _static_clips(1, 2), [[torch.zeros(2, 32, 32)]])
    d = rep.to_dict()
    assert d["bins"] == 256 and len(d["representations"]) == 4
    assert "raw_frames" in rep.table()


def test_report_needs_motion_source():
    with pytest.raises(ValueError):
        entropy_report(None, _static_clips(1, 2))


def test_metrics_agree_with_training_internals():
    from arvae.training import LossWeights, reconstruction_loss

    g = torch.Generator().manual_seed(2)
    x, y = torch.rand(1, 3, 3, 16, 16, generator=g), torch.rand(1, 3, 3, 16, 16, generator=g)
    terms = reconstruction_loss(x, y, [True] * 3, LossWeights(ssim=0.5, perceptual=0.0), terms=True)
    assert float(terms["ssim_term"]) == pytest.approx(1 - float(ssim(x, y)), abs=1e-6)
    mse = float(terms["mse"])
    _, mean_db = psnr(x, y)
    per_frame_mse = ((x.double() - y.double()) ** 2).flatten(2).mean(-1)
    assert mse == pytest.approx(float(per_frame_mse.mean()), abs=1e-6)
    assert mean_db == pytest.approx(float((10 * torch.log10(1 / per_frame_mse)).mean()), abs=1e-6)


def test_zero_sits_mid_bin_for_signed_ranges():
    from arvae.metrics import zero_centred_range

    lo, hi = zero_centred_range(1.0, 256)
    assert hi - lo == pytest.approx(2.0)
    pos = (0.0 - lo) / (hi - lo) * 256
    assert pos - math.floor(pos) == pytest.approx(0.5)
    noise = np.random.default_rng(0).normal(0, 1e-6, 1000)
    assert shannon_entropy(noise, 256, (lo, hi)) == 0.0
