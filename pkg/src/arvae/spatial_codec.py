"""Spatial encoder (spatial supplement) and spatial decoder (frame + state features)."""

from typing import Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import ResBlock, act, conv
from .temporal_codec import FeaturePyramid, TemporalCodecConfig

_EPS = 1e-3


class SpatialEncoder(nn.Module):
    """Current frame + encoder-side propagated features -> spatial supplement (C2, H/r, W/r)."""

    def __init__(self, cfg: TemporalCodecConfig, c2: int):
        super().__init__()
        self.cfg = cfg
        sw = cfg.image_widths
        pw = cfg.propagated_widths()
        active = set(cfg.active_levels())
        self.stages = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(cfg.n_down + 1):
            cin = (3 if i == 0 else sw[i]) + (pw[i] if i in active else 0)
            self.stages.append(nn.Sequential(conv(cin, sw[i]), act(), ResBlock(sw[i])))
            if i > 0:
                self.down.append(nn.Sequential(conv(sw[i - 1], sw[i], stride=2), act()))
        self.out = conv(sw[-1], c2)

    def forward(self, prop: FeaturePyramid, x_t: Tensor) -> Tensor:
        if prop[0] is not None and prop[0].shape[-2:] != x_t.shape[-2:]:
            raise ValueError("propagated features and frame differ in resolution")
        h = x_t
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = self.down[i - 1](h)
            if prop[i] is not None:
                h = torch.cat([h, prop[i]], 1)
            h = stage(h)
        return self.out(h)


class SpatialDecoder(nn.Module):
    """Spatial supplement + decoder-side propagated features + previous state -> (frame, state).

    The reconstruction is ``sigmoid(logit(base) + delta)`` where ``base`` is the
    warped previous frame carried in propagated level 0 (0.5 when that level is
    absent) and ``delta`` comes from the state features. The last conv starts
    at zero so an untrained decoder reproduces the warped frame.
    """

    def __init__(self, cfg: TemporalCodecConfig, c2: int, state_channels: int = 16):
        super().__init__()
        self.cfg = cfg
        self.c2 = c2
        self.state_channels = state_channels
        sw = cfg.image_widths
        pw = cfg.propagated_widths()
        active = set(cfg.active_levels())
        n = cfg.n_down
        self.inp = nn.Sequential(conv(c2, sw[n]), act())
        self.up = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i in range(n, 0, -1):
            if i < n:
                self.up.append(nn.Sequential(conv(sw[i + 1], sw[i]), act()))
            cin = sw[i] + (pw[i] if i in active else 0)
            self.stages.append(nn.Sequential(conv(cin, sw[i]), act(), ResBlock(sw[i])))
        self.up.append(nn.Sequential(conv(sw[1], sw[0]), act()))
        cin = sw[0] + (pw[0] if 0 in active else 0) + state_channels
        self.state = nn.Sequential(conv(cin, state_channels), ResBlock(state_channels))
        self.head = nn.Sequential(conv(state_channels, sw[0]), act(), conv(sw[0], 3))
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def initial_state(self, frame: Tensor) -> Tensor:
        b, _, h, w = frame.shape
        return frame.new_zeros(b, self.state_channels, h, w)

    def forward(self, supplement: Tensor, prop: FeaturePyramid, state: Tensor) -> Tuple[Tensor, Tensor]:
        n = self.cfg.n_down
        if supplement.shape[1] != self.c2:
            raise ValueError(f"spatial supplement needs {self.c2} channels, got {supplement.shape[1]}")
        h = self.inp(supplement)
        up_iter = iter(self.up)
        for k, i in enumerate(range(n, 0, -1)):
            if i < n:
                h = next(up_iter)(F.interpolate(h, scale_factor=2, mode="nearest"))
            if prop[i] is not None:
                if prop[i].shape[-2:] != h.shape[-2:]:
                    raise ValueError(f"propagated level {i} misaligned with supplement path")
                h = torch.cat([h, prop[i]], 1)
            h = self.stages[k](h)
        h = next(up_iter)(F.interpolate(h, scale_factor=2, mode="nearest"))
        if state.shape[-2:] != h.shape[-2:] or state.shape[1] != self.state_channels:
            raise ValueError("state features do not match the decoder configuration")
        parts = [h] + ([prop[0]] if prop[0] is not None else []) + [state]
        new_state = self.state(torch.cat(parts, 1))
        delta = self.head(new_state)
        if prop[0] is not None:
            base = torch.logit(prop[0][:, :3].clamp(_EPS, 1 - _EPS))
        else:
            base = torch.zeros_like(delta)
        return torch.sigmoid(base + delta), new_state


def encode_spatial(encoder: SpatialEncoder, prop: FeaturePyramid, x_t: Tensor) -> Tensor:
    return encoder(prop, x_t)


def decode_spatial(
    decoder: SpatialDecoder, supplement: Tensor, prop: FeaturePyramid, state: Tensor
) -> Tuple[Tensor, Tensor]:
    return decoder(supplement, prop, state)
