"""Reconstruction loss, staged curriculum and checkpointing."""

from __future__ import annotations

import json
import logging
import math
import os
import random
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from .metrics import psnr, ssim, ssim_per_frame
from .model import ARVAE, ArvaeConfig
from .video_io import Clip, sample_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "arvae-checkpoint/1"
PerceptualScorer = Callable[[Tensor, Tensor], Tensor]


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossWeights:
    ssim: float = 0.5
    perceptual: float = 0.5
    perceptual_scorer: Optional[PerceptualScorer] = None
    first_frame: float = 1.0

    def __post_init__(self):
        if min(self.ssim, self.perceptual, self.first_frame) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.perceptual_scorer is None:
            self.perceptual = 0.0


class LossTerms(dict):
    @property
    def total(self) -> Tensor:
        return self["loss"]


def reconstruction_loss(
    x_hat: Tensor, x: Tensor, mask: Sequence[bool], w: LossWeights = LossWeights(), terms: bool = False
):
    """MSE + w.ssim * (1 - SSIM) + w.perceptual * scorer, averaged over masked frames.

    ``x_hat`` and ``x`` are (T, 3, H, W) or (B, T, 3, H, W); ``mask`` has one
    entry per frame. Unmasked frames are never read, so they contribute
    nothing to the value or the gradient.
    """
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    mask = [bool(m) for m in mask]
    if len(mask) != x.shape[-4]:
        raise ValueError(f"mask has {len(mask)} entries for {x.shape[-4]} frames")
    idx = [i for i, m in enumerate(mask) if m]
    if not idx:
        raise ValueError("mask selects no frames")
    a = x_hat[..., idx, :, :, :]
    b = x[..., idx, :, :, :]
    mse = ((a - b) ** 2).mean()
    loss = mse
    ssim_term = a.new_zeros(())
    if w.ssim > 0:
        ssim_term = 1.0 - ssim(a, b)
        loss = loss + w.ssim * ssim_term
    perc = a.new_zeros(())
    if w.perceptual > 0 and w.perceptual_scorer is not None:
        perc = w.perceptual_scorer(a.reshape(-1, *a.shape[-3:]), b.reshape(-1, *b.shape[-3:])).mean()
        loss = loss + w.perceptual * perc
    if terms:
        return LossTerms(loss=loss, mse=mse, ssim_term=ssim_term, perceptual=perc)
    return loss


# ---------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class Stage:
    length: int
    steps: int
    supervised: Tuple[int, int]  # 1-based inclusive frame range

    def mask(self) -> List[bool]:
        lo, hi = self.supervised
        return [lo <= t <= hi for t in range(1, self.length + 1)]


@dataclass(frozen=True)
class StagePlan:
    stages: Tuple[Stage, ...]

    def __post_init__(self):
        prev_len = 1
        for s in self.stages:
            if s.length <= prev_len:
                raise ValueError("stage lengths must strictly increase")
            lo, hi = s.supervised
            if not (1 <= lo <= hi <= s.length):
                raise ValueError(f"supervised range {s.supervised} outside clip of {s.length}")
            if prev_len > 1 and (lo, hi) != (prev_len + 1, s.length):
                raise ValueError(f"stage of length {s.length} must supervise {prev_len + 1}..{s.length}")
            if s.steps < 0:
                raise ValueError("steps must be nonnegative")
            prev_len = s.length

    @classmethod
    def from_lengths(cls, lengths: Sequence[int], steps: Sequence[int]) -> "StagePlan":
        if len(lengths) != len(steps):
            raise ValueError("one step count per stage")
        stages, prev = [], 1
        for L, n in zip(lengths, steps):
            stages.append(Stage(L, n, (2, L) if prev == 1 else (prev + 1, L)))
            prev = L
        return cls(tuple(stages))

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        unknown = set(d) - {"stages"}
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        stages = []
        for s in d["stages"]:
            extra = set(s) - {"length", "steps", "supervised"}
            if extra:
                raise ValueError(f"unknown stage keys: {sorted(extra)}")
            stages.append(Stage(int(s["length"]), int(s["steps"]), tuple(s["supervised"])))
        return cls(tuple(stages))


PAPER_PLAN = StagePlan.from_lengths((3, 5, 7), (300_000, 210_000, 120_000))


def desk_plan(steps: Sequence[int] = (600, 400, 200)) -> StagePlan:
    return StagePlan.from_lengths((3, 5, 7), steps)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 4
    grad_clip: Optional[float] = 1.0
    max_skip: int = 5
    eval_every: int = 100
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Determinism and checkpoints


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def save_checkpoint(path: Union[str, Path], model: ARVAE, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path], expect: Optional[ArvaeConfig] = None) -> Tuple[ARVAE, dict]:
    """Rebuild the model from the stored config and load weights strictly."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an ARVAE checkpoint")
    cfg = ArvaeConfig.from_dict(payload["config"])
    if expect is not None and expect != cfg:
        raise ValueError("checkpoint config differs from the expected config")
    model = ARVAE(cfg)
    own = model.state_dict()
    for k, v in payload["state_dict"].items():
        if k in own and own[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    model.load_state_dict(payload["state_dict"], strict=True)
    return model, payload.get("meta", {})


# ---------------------------------------------------------------------------
# Evaluation


@torch.no_grad()
def evaluate(model: ARVAE, clips: Union[Tensor, Sequence[Tensor]], batch_size: int = 8,
             zero_state: bool = False, w: Optional[LossWeights] = None) -> dict:
    """Per-frame PSNR/SSIM (and loss when ``w`` is given) over a validation set.

    ``psnr_pred`` averages frames 2..T only, since a passthrough first frame
    sits at the PSNR cap and would dominate the plain mean.
    """
    frames = clips if isinstance(clips, Tensor) else torch.stack(list(clips))
    was_training = model.training
    model.eval()
    recs = [model(frames[i : i + batch_size], zero_state=zero_state) for i in range(0, len(frames), batch_size)]
    model.train(was_training)
    rec = torch.cat(recs)
    per_psnr, mean_psnr = psnr(rec, frames)
    out = {
        "psnr": mean_psnr,
        "per_frame_psnr": [float(v) for v in per_psnr],
        "psnr_pred": float(per_psnr[1:].mean()) if len(per_psnr) > 1 else mean_psnr,
        "ssim": float(ssim_per_frame(rec, frames).mean()),
    }
    if w is not None:
        out["loss"] = float(reconstruction_loss(rec, frames, [True] * frames.shape[1], w))
    return out


# ---------------------------------------------------------------------------
# Training loop


class MetricsLog:
    """Append-only JSON-lines writer; keeps records in memory as well."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.records: List[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def _step_loss(model: ARVAE, batch: Tensor, stage: Stage, w: LossWeights) -> LossTerms:
    rec = model(batch)
    terms = reconstruction_loss(rec, batch, stage.mask(), w, terms=True)
    ae = model.image_ae
    if ae is not None and w.first_frame > 0 and any(p.requires_grad for p in ae.parameters()):
        first = reconstruction_loss(rec[:, :1], batch[:, :1], [True], w)
        terms["loss"] = terms["loss"] + w.first_frame * first
    return terms


def run_stage(
    model: ARVAE,
    stage: Stage,
    data: Sequence[Clip],
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    rng: Optional[np.random.Generator] = None,
    weights: Optional[LossWeights] = None,
    val: Optional[Tensor] = None,
    metrics: Optional[MetricsLog] = None,
    out_dir: Optional[Union[str, Path]] = None,
    stage_index: int = 0,
    step_offset: int = 0,
) -> dict:
    """Train one curriculum stage; returns a summary with the final checkpoint path (if any)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    w = weights if weights is not None else LossWeights()
    metrics = metrics if metrics is not None else MetricsLog()
    out_dir = Path(out_dir) if out_dir else None
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    model.train()
    losses = []
    t0 = time.time()
    for step in range(1, stage.steps + 1):
        batch = sample_batch(data, stage.length, opt_cfg.batch_size, rng, opt_cfg.max_skip)
        terms = _step_loss(model, batch, stage, w)
        loss = terms.total
        if not torch.isfinite(loss):
            snap = None
            if out_dir:
                snap = save_checkpoint(out_dir / f"diverged_stage{stage_index + 1}.pt", model,
                                       {"stage": stage_index, "step": step, "batch_sources": batch.shape})
            raise TrainingDiverged(f"non-finite loss at stage {stage_index + 1} step {step}; snapshot {snap}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if opt_cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, opt_cfg.grad_clip)
        opt.step()
        losses.append(float(loss.detach()))
        gstep = step_offset + step
        want_eval = val is not None and (step % opt_cfg.eval_every == 0 or step == stage.steps)
        if want_eval or step % opt_cfg.log_every == 0 or step == 1:
            rec = {
                "step": gstep, "stage": stage_index + 1, "loss": losses[-1],
                "mse": float(terms["mse"].detach()), "ssim_term": float(terms["ssim_term"].detach()),
                "psnr_val": None, "per_frame_psnr": [],
            }
            if want_eval:
                ev = evaluate(model, val)
                rec["psnr_val"], rec["per_frame_psnr"] = ev["psnr"], ev["per_frame_psnr"]
            metrics.write(rec)
            log.info("stage %d step %d loss %.5f psnr_val %s (%.1fs)", stage_index + 1, step, losses[-1],
                     rec["psnr_val"], time.time() - t0)
        if out_dir and opt_cfg.checkpoint_every and step % opt_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage{stage_index + 1}_step{step}.pt", model,
                            {"stage": stage_index + 1, "step": gstep})
    ckpt = None
    if out_dir:
        ckpt = save_checkpoint(out_dir / f"stage{stage_index + 1}.pt", model,
                               {"stage": stage_index + 1, "step": step_offset + stage.steps})
    summary = {"stage": stage_index + 1, "steps": stage.steps, "checkpoint": str(ckpt) if ckpt else None,
               "first_loss": losses[0] if losses else None, "final_loss": losses[-1] if losses else None,
               "seconds": time.time() - t0}
    if val is not None:
        summary["val"] = evaluate(model, val)
    return summary


def pretrain_first_frame(
    model: ARVAE,
    data: Sequence[Clip],
    steps: int,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    rng: Optional[np.random.Generator] = None,
    weights: Optional[LossWeights] = None,
    freeze: bool = True,
) -> Optional[float]:
    """Fit the first-frame image autoencoder on single frames drawn from ``data``.

    Stands in for starting from an already trained image codec. With
    ``freeze`` its weights are excluded from later optimisation.
    """
    ae = model.image_ae
    if ae is None:
        return None
    rng = rng if rng is not None else np.random.default_rng(0)
    w = weights if weights is not None else LossWeights()
    opt = torch.optim.AdamW(ae.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    pool = torch.cat([c.frames for c in data])
    last = None
    ae.train()
    for step in range(steps):
        x = pool[torch.from_numpy(rng.integers(0, len(pool), opt_cfg.batch_size))]
        y = ae.decode(ae.encode(x))
        loss = reconstruction_loss(y.unsqueeze(1), x.unsqueeze(1), [True], w)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite first-frame loss at step {step + 1}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        last = float(loss.detach())
    if freeze:
        for p in ae.parameters():
            p.requires_grad_(False)
    return last


def run_curriculum(
    model: ARVAE,
    plan: StagePlan,
    data: Sequence[Clip],
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    weights: Optional[LossWeights] = None,
    val: Optional[Tensor] = None,
    metrics: Optional[MetricsLog] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[dict]:
    """Run the stages in order, each resuming from the previous stage's weights.

    Returns one summary per stage; with ``val`` each carries the validation
    metrics measured after that stage.
    """
    rng = np.random.default_rng(seed)
    offset = 0
    history = []
    for i, stage in enumerate(plan.stages):
        summary = run_stage(model, stage, data, opt_cfg, rng, weights, val, metrics, out_dir, i, offset)
        offset += stage.steps
        history.append(summary)
    if out_dir:
        save_checkpoint(Path(out_dir) / "final.pt", model, {"stages": len(plan.stages), "step": offset})
    return history
