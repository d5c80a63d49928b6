"""Command-line entry point: ``arvae {synth,train,reconstruct,eval,entropy}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig, load_config
from .metrics import entropy_report, psnr, ssim_per_frame
from .model import ARVAE
from .training import (
    MetricsLog,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    pretrain_first_frame,
    run_curriculum,
    seed_everything,
)
from .video_io import IMAGE_SUFFIXES, Clip, InsufficientFramesError, load_clip, save_frames, synthetic_dataset

log = logging.getLogger("arvae")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared helpers


def _setup(args) -> Tuple[RunConfig, Path]:
    cfg = load_config(args.config).override(args.seed, args.deterministic, args.out)
    if cfg.io.seed is not None:
        seed_everything(cfg.io.seed, cfg.io.deterministic)
    out = Path(cfg.io.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    return cfg, out


def _is_clip_dir(p: Path) -> bool:
    return p.is_dir() and any(f.suffix.lower() in IMAGE_SUFFIXES for f in p.iterdir())


def clip_dirs(root: Path) -> List[Path]:
    """Every directory under ``root`` (inclusive) that holds frame images, sorted."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"no such path: {root}")
    if root.is_file() or _is_clip_dir(root):
        return [root]
    found = sorted(p for p in root.rglob("*") if _is_clip_dir(p))
    if not found:
        raise CliError(f"no frames found under {root}")
    return found


def read_flows(d: Path) -> Optional[List[torch.Tensor]]:
    files = sorted(d.glob("flow_*.npy")) if d.is_dir() else []
    return [torch.from_numpy(np.load(f)) for f in files] or None


def load_clips(paths: Sequence[str], length: Optional[int] = None, levels: int = 0) -> List[Clip]:
    clips = []
    for p in paths:
        for d in clip_dirs(Path(p)):
            clips.append(load_clip(d, length=length, levels=levels))
    return clips


def _levels(model_cfg) -> int:
    return int(np.log2(model_cfg.divisor))


def build_data(cfg: RunConfig) -> Tuple[List[Clip], torch.Tensor]:
    d, levels = cfg.data, _levels(cfg.model)
    kw = dict(max_speed=d.max_speed, n_objects=d.n_objects, texture_scale=d.texture_scale)
    if d.paths:
        train = load_clips(d.paths, levels=levels)
    else:
        train = [s.clip for s in synthetic_dataset(d.clips, d.seed, d.canvas, d.length, **kw)]
    if d.val_paths:
        val_clips = load_clips(d.val_paths, length=d.val_length, levels=levels)
    else:
        val_clips = [s.clip for s in synthetic_dataset(d.val_clips, d.val_seed, d.canvas, d.val_length, **kw)]
    if not train:
        raise CliError("training set is empty")
    for c in train + val_clips:
        c.validate(levels)
    val = torch.stack([c.frames for c in val_clips]) if val_clips else None
    return train, val


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg, out = _setup(args)
    d = cfg.data
    kw = dict(max_speed=d.max_speed, n_objects=d.n_objects, texture_scale=d.texture_scale)
    manifest = {"seed": d.seed, "val_seed": d.val_seed, "splits": {}}
    for split, n, seed, length in (("train", d.clips, d.seed, d.length), ("val", d.val_clips, d.val_seed, d.val_length)):
        entries = []
        for i, sv in enumerate(synthetic_dataset(n, seed, d.canvas, length, **kw)):
            cdir = out / split / f"clip_{i:03d}"
            save_frames(sv.clip.frames, cdir)
            for t, (f, ok) in enumerate(zip(sv.flows, sv.valid)):
                np.save(cdir / f"flow_{t:05d}.npy", f.numpy())
                np.save(cdir / f"valid_{t:05d}.npy", ok.numpy())
            (cdir / "spec.json").write_text(sv.spec.dumps() + "\n")
            entries.append({"id": sv.clip.source_id, "dir": str(cdir.relative_to(out)), "frames": length})
        manifest["splits"][split] = {"count": len(entries), "clips": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {d.clips} training and {d.val_clips} validation clips to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    train, val = build_data(cfg)
    model = ARVAE(cfg.model)
    t = cfg.training
    weights = t.loss_weights()
    seed = cfg.io.seed if cfg.io.seed is not None else 0
    if t.first_frame_steps and model.image_ae is not None:
        loss = pretrain_first_frame(model, train, t.first_frame_steps, t.optimizer,
                                    np.random.default_rng(seed + 1), weights, freeze=t.freeze_first_frame)
        log.info("first-frame codec pretrained, final loss %.5f", loss)
    metrics = MetricsLog(out / "metrics.jsonl")
    try:
        history = run_curriculum(model, t.plan, train, t.optimizer, seed, weights, val, metrics, out)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    (out / "summary.json").write_text(json.dumps(history, indent=2) + "\n")
    for h in history:
        v = h.get("val", {}).get("psnr")
        print(f"stage {h['stage']}: {h['steps']} steps, final loss {h['final_loss']:.5f}"
              + (f", val PSNR {v:.2f} dB" if v is not None else ""))
    print(f"checkpoint: {out / 'final.pt'}")
    return 0


def cmd_reconstruct(args) -> int:
    _, out = _setup(args)
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    clip = load_clip(args.input, length=args.frames, levels=_levels(model.cfg))
    with torch.no_grad():
        rec = model.encode_video(clip.frames).reconstruction
    per, mean = psnr(rec.unsqueeze(0), clip.frames.unsqueeze(0))
    save_frames(rec, out / "reconstruction")
    if args.dump_frames:
        save_frames(torch.cat([clip.frames, rec], dim=-1), out / "side_by_side")
    rows = [(t + 1, float(p)) for t, p in enumerate(per)] + [("mean", mean)]
    table = _table(("frame", "psnr_db"), rows)
    (out / "psnr.tsv").write_text(table + "\n")
    print(table)
    return 0


def cmd_eval(args) -> int:
    _, out = _setup(args)
    model, _ = load_checkpoint(args.checkpoint)
    levels = _levels(model.cfg)
    clips = [c.frames for c in load_clips([args.data], length=args.frames, levels=levels)]
    lengths = {c.shape[0] for c in clips}
    if len(lengths) != 1:
        raise CliError(f"clips have differing lengths {sorted(lengths)}; pass --frames")
    frames = torch.stack(clips)
    res = evaluate(model, frames)
    with torch.no_grad():
        model.eval()
        rec = torch.cat([model(frames[i : i + 8]) for i in range(0, len(frames), 8)])
    ssim_t = ssim_per_frame(rec, frames)
    rows = [(t + 1, p, float(s), "n/a") for t, (p, s) in enumerate(zip(res["per_frame_psnr"], ssim_t))]
    rows.append(("mean", res["psnr"], res["ssim"], "n/a"))
    table = _table(("frame", "psnr_db", "ssim", "perceptual"), rows)
    res["per_frame_ssim"] = [float(s) for s in ssim_t]
    res["perceptual"] = None
    res["clips"] = len(clips)
    (out / "metrics.json").write_text(json.dumps(res, indent=2) + "\n")
    print(table)
    return 0


def cmd_entropy(args) -> int:
    _, out = _setup(args)
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        model.eval()
    dirs = clip_dirs(Path(args.data))
    clips = [load_clip(d, length=args.frames).frames for d in dirs]
    flows = None
    if model is None:
        flows = [read_flows(d) for d in dirs]
        if any(f is None for f in flows):
            raise CliError("without --checkpoint every clip needs flow_*.npy sidecars")
        if args.frames:
            flows = [f[: args.frames - 1] for f in flows]
    rep = entropy_report(model, clips, flows, bins=args.bins, dataset_id=str(args.data), ratio=args.ratio)
    (out / "entropy.json").write_text(rep.dumps() + "\n")
    print(rep.table())
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--deterministic", action="store_true", help="bitwise reproducible kernels")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="arvae", description="Autoregressive video autoencoder toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="render a synthetic translation dataset with true flows")
    sub.add_parser("train", parents=[common], help="run the staged training curriculum")

    r = sub.add_parser("reconstruct", parents=[common], help="encode and decode one clip")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="frame directory or video file")
    r.add_argument("--frames", type=int, help="number of frames to process")
    r.add_argument("--dump-frames", action="store_true", help="also write side-by-side images")

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM table over a clip directory tree")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--frames", type=int)

    h = sub.add_parser("entropy", parents=[common], help="entropy of raw frames vs motion + residual")
    h.add_argument("--data", required=True)
    h.add_argument("--checkpoint", help="use the model's motion; otherwise flow sidecars")
    h.add_argument("--frames", type=int)
    h.add_argument("--bins", type=int, default=256)
    h.add_argument("--ratio", type=int, help="motion downsampling factor (default: model ratio or 8)")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "entropy": cmd_entropy,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, FileNotFoundError, InsufficientFramesError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
