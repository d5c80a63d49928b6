"""Autoregressive video autoencoder: per-frame encode/decode conditioned on the previous reconstruction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import act, conv
from .motion import MotionEstimator
from .spatial_codec import SpatialDecoder, SpatialEncoder
from .temporal_codec import (
    TemporalCodecConfig,
    TemporalDecoder,
    TemporalEncoder,
    check_divisible,
)

FIRST_FRAME_MODES = ("simple_image_ae", "passthrough")
PAPER_RATIOS = (8, 16, 32)
PAPER_LATENT_CHANNELS = (4, 16)


def default_widths(n_down: int, scale: float = 1.0) -> Tuple[int, ...]:
    """(16, 32, 64, 96) for three downsamplings, extended by 128s, times ``scale``."""
    base = [16, 32, 64, 96, 128, 128, 128][: n_down + 1]
    return tuple(max(1, int(round(w * scale))) for w in base)


@dataclass(frozen=True)
class ArvaeConfig:
    n_down: int = 3
    c1: int = 2
    c2: int = 2
    state_channels: int = 16
    motion_widths: Tuple[int, ...] = (16, 32, 64, 96)
    image_widths: Tuple[int, ...] = (16, 32, 64, 96)
    motion_levels: int = 4
    motion_estimator_widths: Tuple[int, ...] = (16, 32, 16)
    motion_estimator_kernel: int = 5
    first_frame_mode: str = "simple_image_ae"
    image_ae_down: int = 3
    image_ae_channels: int = 4
    image_ae_widths: Tuple[int, ...] = (16, 32, 32)
    multi_scale: bool = True
    flow_skip: bool = True
    detach_carry: bool = False

    def __post_init__(self):
        if self.first_frame_mode not in FIRST_FRAME_MODES:
            raise ValueError(f"first_frame_mode must be one of {FIRST_FRAME_MODES}")
        for name in ("c2", "state_channels", "motion_levels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.motion_levels < 2:
            raise ValueError("motion_levels must be at least 2")
        if len(self.image_ae_widths) != self.image_ae_down:
            raise ValueError("image_ae_widths needs one entry per image-AE downsampling")
        self.temporal()  # validates widths

    @property
    def ratio(self) -> int:
        return 2 ** self.n_down

    @property
    def experimental(self) -> bool:
        """True when the config leaves the published variant grid."""
        return self.ratio not in PAPER_RATIOS or (self.c1 + self.c2) not in PAPER_LATENT_CHANNELS

    @property
    def divisor(self) -> int:
        """Frame sizes must be multiples of this."""
        n = max(self.n_down, self.motion_levels - 1)
        if self.first_frame_mode == "simple_image_ae":
            n = max(n, self.image_ae_down)
        return 2 ** n

    def temporal(self) -> TemporalCodecConfig:
        return TemporalCodecConfig(
            n_down=self.n_down,
            c1=self.c1,
            motion_widths=tuple(self.motion_widths),
            image_widths=tuple(self.image_widths),
            multi_scale=self.multi_scale,
            flow_skip=self.flow_skip,
        )

    def latent_shapes(self, h: int, w: int) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
        r = self.ratio
        return (self.c1, h // r, w // r), (self.c2, h // r, w // r)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArvaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def with_(self, **kw) -> "ArvaeConfig":
        return replace(self, **kw)


def paper_variant(ratio: int, scale: float = 1.0, **kw) -> ArvaeConfig:
    """The three published settings: 8x8 with 2+2 channels, 16x16 and 32x32 with 2+14."""
    n_down = {8: 3, 16: 4, 32: 5}[ratio]
    c2 = 2 if ratio == 8 else 14
    widths = default_widths(n_down, scale)
    return ArvaeConfig(n_down=n_down, c1=2, c2=c2, motion_widths=widths, image_widths=widths, **kw)


def desk_config(**kw) -> ArvaeConfig:
    """Small 8x8 variant used for CPU-scale training."""
    base = dict(
        n_down=3, c1=2, c2=2, state_channels=8,
        motion_widths=(8, 16, 32, 48), image_widths=(8, 16, 32, 48),
        motion_estimator_widths=(16, 16), motion_estimator_kernel=3, motion_levels=4,
        image_ae_widths=(16, 32, 32),
    )
    base.update(kw)
    return ArvaeConfig(**base)


def compression_ratio(cfg: ArvaeConfig, h: int, w: int) -> float:
    """Raw element count over per-frame latent element count."""
    r = cfg.ratio
    return 3.0 * h * w / ((cfg.c1 + cfg.c2) * (h // r) * (w // r))


class ImageAutoencoder(nn.Module):
    """Plain conv autoencoder for the first frame."""

    def __init__(self, n_down: int = 3, channels: int = 4, widths: Tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        enc: List[nn.Module] = []
        cin = 3
        for w in widths:
            enc += [conv(cin, w, stride=2), act(), conv(w, w), act()]
            cin = w
        enc.append(conv(cin, channels))
        self.encoder = nn.Sequential(*enc)
        dec: List[nn.Module] = [conv(channels, widths[-1]), act()]
        rev = list(widths[::-1]) + [widths[0]]
        for a, b in zip(rev[:-1], rev[1:]):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), conv(a, b), act(), conv(b, b), act()]
        dec.append(conv(widths[0], 3))
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        return torch.sigmoid(self.decoder(z))


class EncodedVideo(NamedTuple):
    """Latents of a clip. ``first`` is the image-AE latent, or the raw frame under passthrough."""

    first: Tensor
    latents: List[Tuple[Tensor, Tensor]]
    reconstruction: Optional[Tensor] = None
    batched: bool = False

    @property
    def num_frames(self) -> int:
        return len(self.latents) + 1

    def element_count(self) -> int:
        return sum(t[0].numel() + s[0].numel() for t, s in self.latents)


class FrameCodes(NamedTuple):
    temporal: Tensor
    supplement: Tensor
    flow: Tensor


class ARVAE(nn.Module):
    """Frame-by-frame autoencoder.

    Frame 1 goes through the first-frame codec; every later frame is encoded
    into a temporal motion latent and a spatial supplement relative to the
    previous *reconstruction*, then decoded with the recurrent state features.
    All methods take batched (B, 3, H, W) frames unless noted.
    """

    def __init__(self, cfg: ArvaeConfig = ArvaeConfig()):
        super().__init__()
        self.cfg = cfg
        tcfg = cfg.temporal()
        self.motion = MotionEstimator(cfg.motion_levels, cfg.motion_estimator_widths, cfg.motion_estimator_kernel)
        self.temporal_encoder = TemporalEncoder(tcfg)
        self.spatial_encoder = SpatialEncoder(tcfg, cfg.c2)
        self.temporal_decoder = TemporalDecoder(tcfg)
        self.spatial_decoder = SpatialDecoder(tcfg, cfg.c2, cfg.state_channels)
        self.image_ae = (
            ImageAutoencoder(cfg.image_ae_down, cfg.image_ae_channels, cfg.image_ae_widths)
            if cfg.first_frame_mode == "simple_image_ae"
            else None
        )

    # -- per-frame ---------------------------------------------------------

    def encode_frame(self, x_t: Tensor, x_prev: Tensor) -> FrameCodes:
        flow = self.motion(x_t, x_prev)
        latent, prop = self.temporal_encoder(flow, x_prev)
        supplement = self.spatial_encoder(prop, x_t)
        return FrameCodes(latent, supplement, flow)

    def decode_frame(self, latent: Tensor, supplement: Tensor, x_prev: Tensor, state: Tensor) -> Tuple[Tensor, Tensor]:
        prop = self.temporal_decoder(latent, x_prev)
        return self.spatial_decoder(supplement, prop, state)

    def initial_state(self, frame: Tensor) -> Tensor:
        return self.spatial_decoder.initial_state(frame)

    # -- first frame -------------------------------------------------------

    def encode_first(self, x: Tensor) -> Tensor:
        return x if self.image_ae is None else self.image_ae.encode(x)

    def decode_first(self, z: Tensor) -> Tensor:
        return z if self.image_ae is None else self.image_ae.decode(z)

    # -- clips -------------------------------------------------------------

    def check_frames(self, frames: Tensor) -> None:
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise ValueError(f"expected (B, T, 3, H, W), got {tuple(frames.shape)}")
        h, w = frames.shape[-2:]
        check_divisible(h, w, self.cfg.divisor.bit_length() - 1)

    def forward(self, frames: Tensor, zero_state: bool = False) -> Tensor:
        """Encode and reconstruct a batch of clips (B, T, 3, H, W) in one unrolled pass.

        ``zero_state`` feeds zero state features to every frame (ablation).
        """
        self.check_frames(frames)
        x_hat = self.decode_first(self.encode_first(frames[:, 0]))
        outs = [x_hat]
        state = self.initial_state(x_hat)
        for t in range(1, frames.shape[1]):
            prev = x_hat.detach() if self.cfg.detach_carry else x_hat
            if self.cfg.detach_carry:
                state = state.detach()
            if zero_state:
                state = torch.zeros_like(state)
            codes = self.encode_frame(frames[:, t], prev)
            x_hat, state = self.decode_frame(codes.temporal, codes.supplement, prev, state)
            outs.append(x_hat)
        return torch.stack(outs, 1)

    def encode_video(self, clip: Tensor) -> EncodedVideo:
        """Encode (T, 3, H, W) or (B, T, 3, H, W). Decoding runs alongside to obtain the reference frames."""
        batched = clip.ndim == 5
        frames = clip if batched else clip.unsqueeze(0)
        self.check_frames(frames)
        first = self.encode_first(frames[:, 0])
        x_hat = self.decode_first(first)
        recon = [x_hat]
        state = self.initial_state(x_hat)
        latents = []
        for t in range(1, frames.shape[1]):
            codes = self.encode_frame(frames[:, t], x_hat)
            x_hat, state = self.decode_frame(codes.temporal, codes.supplement, x_hat, state)
            recon.append(x_hat)
            latents.append((codes.temporal, codes.supplement))
        rec = torch.stack(recon, 1)
        if not batched:
            first, rec = first[0], rec[0]
            latents = [(tl[0], sl[0]) for tl, sl in latents]
        return EncodedVideo(first, latents, rec, batched)

    def decode_video(self, enc: EncodedVideo, zero_state: bool = False) -> Tensor:
        """Roll the decoder over the stored latents. Returns frames shaped like the encoder input."""
        first = enc.first if enc.batched else enc.first.unsqueeze(0)
        x_hat = self.decode_first(first)
        out = [x_hat]
        state = self.initial_state(x_hat)
        for tl, sl in enc.latents:
            if not enc.batched:
                tl, sl = tl.unsqueeze(0), sl.unsqueeze(0)
            if zero_state:
                state = torch.zeros_like(state)
            x_hat, state = self.decode_frame(tl, sl, x_hat, state)
            out.append(x_hat)
        rec = torch.stack(out, 1)
        return rec if enc.batched else rec[0]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "ARVAE",
    "ArvaeConfig",
    "EncodedVideo",
    "FrameCodes",
    "ImageAutoencoder",
    "compression_ratio",
    "count_parameters",
    "default_widths",
    "desk_config",
    "paper_variant",
]
