"""Temporal encoder and decoder: motion features, image pyramids and feature propagation.

A feature pyramid is a plain list indexed finest-first: level ``i`` lives at
``H / 2**i``. With multi-scale propagation disabled only the coarsest level
is populated and the others are ``None``.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .layers import DownBlock, UpBlock, act, conv
from .motion import downsample_flow, upsample_flow, warp

FeaturePyramid = List[Optional[Tensor]]


@dataclass(frozen=True)
class TemporalCodecConfig:
    n_down: int = 3
    c1: int = 2
    motion_widths: Tuple[int, ...] = (16, 32, 64, 96)
    image_widths: Tuple[int, ...] = (16, 32, 64, 96)
    multi_scale: bool = True
    flow_skip: bool = True

    def __post_init__(self):
        if self.n_down < 1:
            raise ValueError("n_down must be at least 1")
        for name in ("motion_widths", "image_widths"):
            widths = getattr(self, name)
            if len(widths) != self.n_down + 1:
                raise ValueError(f"{name} needs {self.n_down + 1} entries, got {len(widths)}")
            if min(widths) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.c1 <= 0:
            raise ValueError("c1 must be positive")
        if self.flow_skip and self.c1 < 2:
            raise ValueError("flow_skip needs at least two temporal latent channels")

    @property
    def ratio(self) -> int:
        return 2 ** self.n_down

    def propagated_widths(self) -> List[int]:
        """Channel count of each propagated level (level 0 carries the RGB frame too)."""
        return [self.image_widths[0] + 3] + list(self.image_widths[1:])

    def active_levels(self) -> List[int]:
        return list(range(self.n_down + 1)) if self.multi_scale else [self.n_down]


def latent_flows(latent: Tensor, cfg: TemporalCodecConfig) -> FeaturePyramid:
    """Per-level base displacements read from the first two latent channels.

    With ``flow_skip`` those channels hold a motion field in latent-pixel
    units; level ``i`` gets it upsampled to ``H / 2**i`` and rescaled.
    Without the skip every level starts from zero displacement.
    """
    n = cfg.n_down
    out: FeaturePyramid = [None] * (n + 1)
    if not cfg.flow_skip:
        return out
    coarse = latent[:, :2]
    for i in cfg.active_levels():
        out[i] = coarse if i == n else upsample_flow(coarse, 2 ** (n - i))
    return out


def check_divisible(h: int, w: int, n_down: int) -> None:
    div = 2 ** n_down
    if h % div or w % div:
        raise ValueError(f"frame size {h}x{w} not divisible by {div}")


class ImageFeatureExtractor(nn.Module):
    """Pyramid of previous-frame features; level 0 keeps the raw frame alongside."""

    def __init__(self, cfg: TemporalCodecConfig):
        super().__init__()
        self.cfg = cfg
        iw = cfg.image_widths
        self.stem = nn.Sequential(conv(3, iw[0]), act())
        pw = cfg.propagated_widths()
        self.down = nn.ModuleList(DownBlock(pw[i], iw[i + 1]) for i in range(cfg.n_down))

    def forward(self, x_prev: Tensor) -> FeaturePyramid:
        check_divisible(*x_prev.shape[-2:], self.cfg.n_down)
        feats = [torch.cat([x_prev, self.stem(x_prev)], 1)]
        for blk in self.down:
            feats.append(blk(feats[-1]))
        return feats


class FeaturePropagation(nn.Module):
    """Warp each image level by its motion level, then cascade fine-to-coarse.

    Motion features become a pixel displacement through a per-level 1x1
    projection. After warping, level ``i``'s output is downsampled and
    concatenated onto level ``i + 1`` before a fusion conv.
    """

    def __init__(self, cfg: TemporalCodecConfig, motion_widths: Sequence[int]):
        super().__init__()
        self.cfg = cfg
        self.levels = cfg.active_levels()
        pw = cfg.propagated_widths()
        self.to_disp = nn.ModuleDict({str(i): nn.Conv2d(motion_widths[i], 2, 1) for i in self.levels})
        for p in self.to_disp.values():
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)
        self.down = nn.ModuleDict()
        self.fuse = nn.ModuleDict()
        if cfg.multi_scale:
            for i in range(1, cfg.n_down + 1):
                self.down[str(i)] = nn.Sequential(conv(pw[i - 1], pw[i], stride=2), act())
                self.fuse[str(i)] = nn.Sequential(conv(2 * pw[i], pw[i]), act())

    def forward(
        self, motion_pyr: FeaturePyramid, image_pyr: FeaturePyramid, return_disp: bool = False,
        base: Optional[FeaturePyramid] = None,
    ):
        if len(motion_pyr) != len(image_pyr):
            raise ValueError("motion and image pyramids differ in depth")
        out: FeaturePyramid = [None] * len(image_pyr)
        disps: FeaturePyramid = [None] * len(image_pyr)
        for i in self.levels:
            m, f = motion_pyr[i], image_pyr[i]
            if m is None or m.shape[-2:] != f.shape[-2:]:
                raise ValueError(f"pyramids misaligned at level {i}")
            disps[i] = self.to_disp[str(i)](m)
            if base is not None and base[i] is not None:
                disps[i] = disps[i] + base[i]
            warped = warp(f, disps[i])
            if i == 0 or not self.cfg.multi_scale:
                out[i] = warped
            else:
                out[i] = self.fuse[str(i)](torch.cat([warped, self.down[str(i)](out[i - 1])], 1))
        return (out, disps) if return_disp else out


class TemporalEncoder(nn.Module):
    """Motion field + previous frame -> (temporal motion latent, propagated features)."""

    def __init__(self, cfg: TemporalCodecConfig):
        super().__init__()
        self.cfg = cfg
        mw = cfg.motion_widths
        self.stem = nn.Sequential(conv(2, mw[0]), act())
        # level 0 carries the raw motion field next to the stem features
        level_w = [mw[0] + 2] + list(mw[1:])
        self.down = nn.ModuleList(DownBlock(level_w[i], mw[i + 1]) for i in range(cfg.n_down))
        self.to_latent = nn.Conv2d(mw[-1], cfg.c1, 1)
        if cfg.flow_skip:
            # flow channels start as the pooled field exactly, with no learned offset
            with torch.no_grad():
                self.to_latent.weight[:2].zero_()
                self.to_latent.bias[:2].zero_()
        self.images = ImageFeatureExtractor(cfg)
        self.propagation = FeaturePropagation(cfg, level_w)

    def motion_pyramid(self, flow: Tensor) -> FeaturePyramid:
        check_divisible(*flow.shape[-2:], self.cfg.n_down)
        feats = [torch.cat([flow, self.stem(flow)], 1)]
        for blk in self.down:
            feats.append(blk(feats[-1]))
        return feats

    def forward(self, flow: Tensor, x_prev: Tensor, return_disp: bool = False):
        mpyr = self.motion_pyramid(flow)
        latent = self.to_latent(mpyr[-1])
        if self.cfg.flow_skip:
            # the leading channels carry the pooled field itself
            pooled = downsample_flow(flow, self.cfg.ratio)
            latent = latent + torch.cat([pooled, latent.new_zeros(latent.shape[0], self.cfg.c1 - 2,
                                                                  *latent.shape[-2:])], 1)
        # propagate exactly as the decoder will, from the latent alone
        base = latent_flows(latent, self.cfg)
        prop = self.propagation(mpyr, self.images(x_prev), return_disp=return_disp, base=base)
        if return_disp:
            return latent, prop[0], prop[1]
        return latent, prop


class TemporalDecoder(nn.Module):
    """Temporal motion latent + previous frame -> propagated features.

    Mirrors :class:`TemporalEncoder` with upsampling motion blocks and its
    own image extractor and propagation weights.
    """

    def __init__(self, cfg: TemporalCodecConfig):
        super().__init__()
        self.cfg = cfg
        mw = cfg.motion_widths
        self.from_latent = nn.Sequential(conv(cfg.c1, mw[-1]), act())
        n = cfg.n_down
        self.up = nn.ModuleList(UpBlock(mw[i + 1], mw[i]) for i in range(n)) if cfg.multi_scale else None
        self.images = ImageFeatureExtractor(cfg)
        self.propagation = FeaturePropagation(cfg, mw)

    def motion_pyramid(self, latent: Tensor) -> FeaturePyramid:
        if latent.shape[1] != self.cfg.c1:
            raise ValueError(f"temporal latent needs {self.cfg.c1} channels, got {latent.shape[1]}")
        n = self.cfg.n_down
        feats: FeaturePyramid = [None] * (n + 1)
        feats[n] = self.from_latent(latent)
        if self.up is not None:
            for i in reversed(range(n)):
                feats[i] = self.up[i](feats[i + 1])
        return feats

    def forward(self, latent: Tensor, x_prev: Tensor, return_disp: bool = False):
        h, w = x_prev.shape[-2:]
        r = self.cfg.ratio
        if latent.shape[-2:] != (h // r, w // r):
            raise ValueError(f"latent {tuple(latent.shape[-2:])} does not match frame {h}x{w} at ratio {r}")
        return self.propagation(self.motion_pyramid(latent), self.images(x_prev), return_disp=return_disp,
                                base=latent_flows(latent, self.cfg))


def encode_temporal(encoder: TemporalEncoder, flow: Tensor, x_prev: Tensor) -> Tuple[Tensor, FeaturePyramid]:
    return encoder(flow, x_prev)


def decode_temporal(decoder: TemporalDecoder, latent: Tensor, x_prev: Tensor) -> FeaturePyramid:
    return decoder(latent, x_prev)
