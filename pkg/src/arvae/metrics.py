"""Image quality metrics and histogram entropy analysis."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

PSNR_CAP = 100.0  # reported for identical inputs


def psnr(x: Tensor, y: Tensor, cap: float = PSNR_CAP) -> Tuple[Tensor, float]:
    """Per-frame PSNR in dB for [0, 1] frames, plus the mean over frames.

    ``x`` and ``y`` are (T, 3, H, W) or (B, T, 3, H, W); the per-frame vector
    averages over the batch. Zero error is reported as ``cap``.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    err = (x.detach().double() - y.detach().double()) ** 2
    mse = err.flatten(-3).mean(-1)
    db = torch.where(mse > 0, 10.0 * torch.log10(1.0 / mse.clamp_min(1e-300)), torch.full_like(mse, cap))
    db = db.clamp(max=cap)
    if db.ndim == 2:
        db = db.mean(0)
    return db, float(db.mean())


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    return (g / g.sum()).to(dtype)


def ssim_map(
    x: Tensor, y: Tensor, window: int = 11, sigma: float = 1.5, data_range: float = 1.0,
    k1: float = 0.01, k2: float = 0.03,
) -> Tensor:
    """Local SSIM over valid windows for (N, C, H, W) inputs.

    The Gaussian window shrinks to the largest odd size that fits frames
    smaller than ``window``.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    c = x.shape[1]
    size = min(window, x.shape[-1], x.shape[-2])
    size -= 1 - size % 2
    g = gaussian_window(size, sigma, x.dtype).to(x.device)
    gh = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    gv = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def blur(z):
        return F.conv2d(F.conv2d(z, gh, groups=c), gv, groups=c)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x: Tensor, y: Tensor, **kw) -> Tensor:
    """Mean SSIM over pixels, channels and frames. Accepts any (..., C, H, W)."""
    shape = x.shape
    return ssim_map(x.reshape(-1, *shape[-3:]), y.reshape(-1, *shape[-3:]), **kw).mean()


def ssim_per_frame(x: Tensor, y: Tensor, **kw) -> Tensor:
    """SSIM per frame for (T, 3, H, W) or (B, T, 3, H, W), averaged over the batch."""
    t = x.shape[-4]
    m = ssim_map(x.reshape(-1, *x.shape[-3:]), y.reshape(-1, *x.shape[-3:]), **kw)
    per = m.flatten(1).mean(1).view(-1, t)
    return per.mean(0)


# ---------------------------------------------------------------------------
# Entropy


def histogram(values, bins: int, value_range: Tuple[float, float]) -> np.ndarray:
    if bins < 2:
        raise ValueError("need at least two bins")
    lo, hi = value_range
    if not hi > lo:
        raise ValueError("empty histogram range")
    v = values.detach().cpu().numpy() if isinstance(values, Tensor) else np.asarray(values)
    v = v.astype(np.float64).ravel()
    if not np.isfinite(v).all():
        raise ValueError("entropy input holds non-finite values")
    idx = np.floor((np.clip(v, lo, hi) - lo) / (hi - lo) * bins).astype(np.int64)
    return np.bincount(np.minimum(idx, bins - 1), minlength=bins)


def entropy_of_counts(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def shannon_entropy(values, bins: int = 256, value_range: Tuple[float, float] = (0.0, 1.0)) -> float:
    """Bits per element of ``values`` quantised into ``bins`` uniform bins over ``value_range``.

    Values outside the range are clamped into the end bins.
    """
    return entropy_of_counts(histogram(values, bins, value_range))


@dataclass
class RepresentationEntropy:
    name: str
    bits_per_element: float
    element_count: int
    value_range: Tuple[float, float]

    @property
    def bits_total(self) -> float:
        return self.bits_per_element * self.element_count


@dataclass
class EntropyReport:
    dataset_id: str
    bins: int
    entries: List[RepresentationEntropy] = field(default_factory=list)
    frames: int = 0
    notes: str = (
        "uniform bins; raw frames over [0,1]; signed values over a width-2m range with a bin "
        "centred on zero (m = largest displacement for motion, 1 for residuals); element "
        "counts are per transmitted frame."
    )

    def __getitem__(self, name: str) -> RepresentationEntropy:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def combined(self, names: Sequence[str]) -> RepresentationEntropy:
        """Pool several representations: total bits over total elements."""
        parts = [self[n] for n in names]
        count = sum(p.element_count for p in parts)
        bits = sum(p.bits_total for p in parts)
        return RepresentationEntropy("+".join(names), bits / max(count, 1), count, (math.nan, math.nan))

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "bins": self.bins,
            "frames": self.frames,
            "notes": self.notes,
            "representations": [
                {**asdict(e), "bits_total": e.bits_total} for e in self.entries
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [f"# dataset: {self.dataset_id}  bins: {self.bins}  frames: {self.frames}",
                f"# {self.notes}",
                f"{'representation':<22}{'bits/elem':>10}{'elements':>10}{'bits/frame':>12}"]
        for e in self.entries:
            rows.append(f"{e.name:<22}{e.bits_per_element:>10.3f}{e.element_count:>10d}{e.bits_total:>12.1f}")
        return "\n".join(rows)


def zero_centred_range(m: float, bins: int) -> Tuple[float, float]:
    """Range of width 2m shifted by half a bin so that one bin is centred on zero.

    With an even bin count a plain (-m, m) range puts zero on a bin edge, and
    round-off noise around an exact zero would then straddle two bins.
    """
    half = m / bins
    return (-m - half, m - half)


def _symmetric_range(tensors: Sequence[Tensor], bins: int, floor: float = 1.0) -> Tuple[float, float]:
    m = max((float(t.abs().max()) for t in tensors), default=0.0)
    return zero_centred_range(max(m, floor), bins)


@torch.no_grad()
def entropy_report(
    model=None,
    clips: Sequence[Tensor] = (),
    flows: Optional[Sequence[Sequence[Tensor]]] = None,
    bins: int = 256,
    dataset_id: str = "dataset",
    ratio: Optional[int] = None,
) -> EntropyReport:
    """Entropy of raw frames versus the motion + residual decomposition.

    Motion comes from ``model``'s estimator when a model is given, otherwise
    from ``flows`` (per clip, one (2, H, W) field per consecutive pair).
    Residuals are ``x_t - warp(x_ref, M)`` where ``x_ref`` is the model's
    previous reconstruction, or the true previous frame without a model. With
    a model the latent temporal motion and spatial supplement are reported too.

    Element counts are per predicted frame: raw 3HW, motion 2(H/r)(W/r), residual 3HW.
    """
    from .motion import downsample_flow, warp

    if model is None and flows is None:
        raise ValueError("need a model or ground-truth flows")
    if ratio is None:
        ratio = model.cfg.ratio if model is not None else 8
    raw, motion_full, motion_down, resid, t_lat, s_lat = [], [], [], [], [], []
    n_pred = 0
    h = w = 0
    for ci, clip in enumerate(clips):
        clip = clip if clip.ndim == 4 else clip[0]
        h, w = clip.shape[-2:]
        raw.append(clip[1:])
        if model is not None:
            enc = model.encode_video(clip)
            rec = enc.reconstruction
            for t in range(1, clip.shape[0]):
                prev = rec[t - 1 : t]
                m = model.motion(clip[t : t + 1], prev)
                motion_full.append(m[0])
                resid.append((clip[t : t + 1] - warp(prev, m))[0])
                tl, sl = enc.latents[t - 1]
                t_lat.append(tl)
                s_lat.append(sl)
        else:
            for t in range(1, clip.shape[0]):
                m = flows[ci][t - 1].unsqueeze(0)
                motion_full.append(m[0])
                resid.append((clip[t : t + 1] - warp(clip[t - 1 : t], m))[0])
        n_pred += clip.shape[0] - 1
    for m in motion_full:
        motion_down.append(downsample_flow(m.unsqueeze(0), ratio)[0])

    rep = EntropyReport(dataset_id=dataset_id, bins=bins, frames=n_pred)
    hr, wr = h // ratio, w // ratio

    def add(name, tensors, rng, count):
        vals = torch.cat([t.reshape(-1) for t in tensors]) if tensors else torch.zeros(1)
        rep.entries.append(RepresentationEntropy(name, shannon_entropy(vals, bins, rng), count, rng))

    add("raw_frames", raw, (0.0, 1.0), 3 * h * w)
    add("motion_field", motion_full, _symmetric_range(motion_full, bins), 2 * h * w)
    add("motion_downsampled", motion_down, _symmetric_range(motion_down, bins), 2 * hr * wr)
    add("residual", resid, zero_centred_range(1.0, bins), 3 * h * w)
    if model is not None:
        c1, c2 = model.cfg.c1, model.cfg.c2
        add("temporal_latent", t_lat, _symmetric_range(t_lat, bins, 1e-6), c1 * hr * wr)
        add("spatial_supplement", s_lat, _symmetric_range(s_lat, bins, 1e-6), c2 * hr * wr)
    return rep


DECOUPLED = ("motion_downsampled", "residual")
