"""Backward warping and coarse-to-fine motion estimation."""

from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def _base_grid(b: int, h: int, w: int, like: Tensor) -> Tensor:
    ys = torch.arange(h, dtype=like.dtype, device=like.device)
    xs = torch.arange(w, dtype=like.dtype, device=like.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy]).unsqueeze(0).expand(b, -1, -1, -1)


def warp(features: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``features`` by ``flow``: ``out(p) = features(p + flow(p))``.

    Sampling is bilinear with clamp-to-edge borders and differentiable with
    respect to both inputs.

    Args:
        features: (C, h, w) or (B, C, h, w).
        flow: (2, h, w) or (B, 2, h, w); channel 0 is horizontal, channel 1
            vertical, both in pixels of the features' own grid.
    """
    unbatched = features.ndim == 3
    if unbatched:
        features, flow = features.unsqueeze(0), flow.unsqueeze(0)
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be (B, 2, h, w), got {tuple(flow.shape)}")
    if features.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"resolution mismatch: features {tuple(features.shape[-2:])} vs flow {tuple(flow.shape[-2:])}"
        )
    b, _, h, w = flow.shape
    if features.shape[0] != b:
        features = features.expand(b, -1, -1, -1)
    pos = _base_grid(b, h, w, flow) + flow
    # pixel-edge normalisation: the round trip through [-1, 1] divides by the
    # size itself, which is exact for power-of-two sizes, so integer flows
    # sample pixels bit-exactly; border padding clamps to centres 0 and size-1
    gx = (2.0 * pos[:, 0] + 1.0) / w - 1.0
    gy = (2.0 * pos[:, 1] + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(features, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0] if unbatched else out


def upsample_flow(flow: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling that rescales displacements to the finer grid."""
    up = F.interpolate(flow, scale_factor=factor, mode="bilinear", align_corners=False)
    return up * factor


def downsample_flow(flow: Tensor, factor: int = 2) -> Tensor:
    return F.avg_pool2d(flow, factor) / factor


def image_pyramid(x: Tensor, levels: int) -> List[Tensor]:
    """Average-pooled pyramid, finest first."""
    pyr = [x]
    for _ in range(levels - 1):
        pyr.append(F.avg_pool2d(pyr[-1], 2))
    return pyr


class FlowPredictor(nn.Module):
    """Small conv stack mapping (target, warped source, current flow) to a flow increment."""

    def __init__(self, widths: Sequence[int] = (16, 32, 16), kernel: int = 5):
        super().__init__()
        layers: List[nn.Module] = []
        cin = 8
        for c in widths:
            layers += [nn.Conv2d(cin, c, kernel, padding=kernel // 2), nn.LeakyReLU(0.1)]
            cin = c
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, 2, kernel, padding=kernel // 2)
        # untrained estimator must emit zero flow
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, target: Tensor, warped: Tensor, flow: Tensor) -> Tensor:
        return self.out(self.body(torch.cat([target, warped, flow], 1)))


class MotionEstimator(nn.Module):
    """SpyNet-style residual flow pyramid.

    At the coarsest of ``levels`` scales a flow is predicted from the frame
    pair; every finer scale upsamples it, warps the previous frame by it and
    adds a predicted correction. Returns a backward flow that warps
    ``x_prev`` onto ``x_t`` at full resolution.
    """

    def __init__(self, levels: int = 4, widths: Sequence[int] = (16, 32, 16), kernel: int = 5):
        super().__init__()
        if levels < 2:
            raise ValueError("motion estimator needs at least two pyramid levels")
        self.levels = levels
        self.predictors = nn.ModuleList(FlowPredictor(widths, kernel) for _ in range(levels))

    def forward(self, x_t: Tensor, x_prev: Tensor) -> Tensor:
        h, w = x_t.shape[-2:]
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise ValueError(f"frame size {h}x{w} not divisible by {div}")
        # centre intensities so zero flow predictions stay unbiased
        tgt = image_pyramid(x_t - 0.5, self.levels)
        src = image_pyramid(x_prev - 0.5, self.levels)
        coarse = tgt[-1]
        flow = coarse.new_zeros(coarse.shape[0], 2, *coarse.shape[-2:])
        for lvl in reversed(range(self.levels)):
            if lvl != self.levels - 1:
                flow = upsample_flow(flow)
            warped = warp(src[lvl], flow)
            flow = flow + self.predictors[lvl](tgt[lvl], warped, flow)
        return flow


def estimate_motion(x_t: Tensor, x_prev: Tensor, estimator: MotionEstimator) -> Tensor:
    """Functional entry point; accepts (3, H, W) or batched frames."""
    if x_t.shape != x_prev.shape:
        raise ValueError("frames must share a shape")
    if x_t.ndim == 3:
        return estimator(x_t.unsqueeze(0), x_prev.unsqueeze(0))[0]
    return estimator(x_t, x_prev)


def endpoint_error(flow: Tensor, truth: Tensor, mask: Tensor = None) -> Tensor:
    """Mean Euclidean distance between flow vectors, optionally over ``mask``."""
    epe = torch.linalg.vector_norm(flow - truth, dim=-3)
    if mask is not None:
        return epe[mask.expand_as(epe)].mean()
    return epe.mean()
