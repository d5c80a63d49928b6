"""Frame ingestion, skip-aware clip sampling and synthetic oracle video."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MAX_SKIP = 5


class InsufficientFramesError(ValueError):
    """Raised when a source holds fewer frames than requested."""


@dataclass
class Clip:
    """A run of frames, channel-first float32 in [0, 1], shape (T, 3, H, W)."""

    frames: torch.Tensor
    source_id: str = ""
    fps_hint: Optional[float] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"clip frames must be (T, 3, H, W), got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1:
            raise ValueError("clip must hold at least one frame")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.frames.shape[2]), int(self.frames.shape[3])

    def validate(self, levels: int = 0) -> "Clip":
        """Check the value range and divisibility by ``2**levels``."""
        f = self.frames
        if not torch.isfinite(f).all():
            raise ValueError(f"clip {self.source_id!r} holds non-finite values")
        if f.min() < 0 or f.max() > 1:
            raise ValueError(f"clip {self.source_id!r} values leave [0, 1]")
        h, w = self.size
        div = 2 ** levels
        if h % div or w % div:
            raise ValueError(f"clip size {h}x{w} not divisible by {div}")
        return self


# ---------------------------------------------------------------------------
# Loading


def _frame_index(path: Path) -> int:
    m = re.search(r"(\d+)(?!.*\d)", path.stem)
    if m is None:
        raise ValueError(f"frame file {path.name} carries no frame number")
    return int(m.group(1))


def list_frame_files(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    files = [p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=_frame_index)


def _fit_to_size(img: np.ndarray, size: Optional[Tuple[int, int]]) -> np.ndarray:
    """Center-crop to the target aspect ratio, then resize. ``img`` is (H, W, 3) uint8."""
    if size is None:
        return img
    th, tw = size
    h, w = img.shape[:2]
    if (h, w) == (th, tw):
        return img
    if h * tw > w * th:
        ch, cw = max(1, round(w * th / tw)), w
    else:
        ch, cw = h, max(1, round(h * tw / th))
    top, left = (h - ch) // 2, (w - cw) // 2
    img = img[top : top + ch, left : left + cw]
    if (ch, cw) != (th, tw):
        img = np.asarray(Image.fromarray(img).resize((tw, th), Image.BILINEAR))
    return img


def _read_video_frames(path: Path, start: int, length: int) -> List[np.ndarray]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ValueError(f"cannot open video {path}")
    frames = []
    idx = 0
    try:
        while len(frames) < length:
            ok, bgr = cap.read()
            if not ok:
                break
            if idx >= start:
                frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
            idx += 1
    finally:
        cap.release()
    return frames


def load_clip(
    path: Union[str, Path],
    start: int = 0,
    length: Optional[int] = None,
    size: Optional[Tuple[int, int]] = None,
    levels: int = 0,
) -> Clip:
    """Read ``length`` frames starting at ``start``.

    ``path`` is either a directory of numbered images or a video file that
    OpenCV can decode. Frames are center-cropped and resized to ``size``
    (H, W) when given; the result must be divisible by ``2**levels``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such clip source: {path}")
    if start < 0:
        raise ValueError("start must be non-negative")
    if path.is_dir():
        files = list_frame_files(path)
        if length is None:
            length = len(files) - start
        if length < 1 or start + length > len(files):
            raise InsufficientFramesError(
                f"insufficient frames: {path} holds {len(files)}, requested {start}+{length}"
            )
        raw = [np.asarray(Image.open(f).convert("RGB")) for f in files[start : start + length]]
    else:
        want = length if length is not None else 1 << 30
        raw = _read_video_frames(path, start, want)
        if not raw or (length is not None and len(raw) < length):
            raise InsufficientFramesError(f"insufficient frames in {path} for {start}+{length}")
    arr = np.stack([_fit_to_size(f, size) for f in raw]).astype(np.float32) / 255.0
    frames = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    return Clip(frames, source_id=str(path)).validate(levels)


def save_frames(frames: torch.Tensor, directory: Union[str, Path], prefix: str = "frame_") -> List[Path]:
    """Write (T, 3, H, W) frames in [0, 1] as 8-bit PNGs with zero-padded numbers."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = (frames.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    paths = []
    for i, img in enumerate(arr):
        p = directory / f"{prefix}{i:05d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Training-clip sampling


def sample_indices(
    num_frames: int,
    stage_length: int,
    rng: np.random.Generator,
    max_skip: int = MAX_SKIP,
    tries: int = 32,
) -> List[int]:
    """Pick ``stage_length`` source indices with 0..max_skip frames skipped between neighbours.

    Gaps are drawn uniformly; draws that overrun the source are rejected,
    and after ``tries`` rejections the largest allowed skip shrinks by one.
    """
    if stage_length < 1:
        raise ValueError("stage_length must be positive")
    if num_frames < stage_length:
        raise InsufficientFramesError(
            f"insufficient frames: source holds {num_frames}, stage needs {stage_length}"
        )
    n_gaps = stage_length - 1
    skip = max_skip
    while True:
        for _ in range(tries):
            gaps = rng.integers(1, skip + 2, size=n_gaps)
            span = int(gaps.sum())
            if span <= num_frames - 1:
                start = int(rng.integers(0, num_frames - span))
                return [start] + (start + np.cumsum(gaps)).tolist()
        skip -= 1
        if skip < 0:  # unreachable while num_frames >= stage_length
            raise InsufficientFramesError("cannot fit stage length into source")


def sample_training_clip(
    dataset: Union[Clip, Sequence[Clip]],
    stage_length: int,
    rng: np.random.Generator,
    max_skip: int = MAX_SKIP,
) -> Clip:
    """Draw one training clip of ``stage_length`` frames with random frame skipping."""
    clips = [dataset] if isinstance(dataset, Clip) else list(dataset)
    if not clips:
        raise ValueError("empty dataset")
    clip = clips[int(rng.integers(len(clips)))] if len(clips) > 1 else clips[0]
    idx = sample_indices(len(clip), stage_length, rng, max_skip)
    return Clip(clip.frames[idx], source_id=f"{clip.source_id}@{','.join(map(str, idx))}")


def sample_batch(
    dataset: Sequence[Clip],
    stage_length: int,
    batch_size: int,
    rng: np.random.Generator,
    max_skip: int = MAX_SKIP,
) -> torch.Tensor:
    """Stack ``batch_size`` sampled clips into (B, T, 3, H, W)."""
    return torch.stack(
        [sample_training_clip(dataset, stage_length, rng, max_skip).frames for _ in range(batch_size)]
    )


# ---------------------------------------------------------------------------
# Synthetic oracle video


@dataclass
class SyntheticObject:
    shape: str = "square"  # "square" or "disk"
    size: int = 16
    texture_seed: int = 0
    velocity: Tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels per frame
    position: Tuple[float, float] = (0.0, 0.0)  # top-left (x, y) at frame 0


@dataclass
class SyntheticSpec:
    canvas: Tuple[int, int] = (64, 64)  # (H, W)
    length: int = 7
    background: int = 0
    objects: List[SyntheticObject] = field(default_factory=list)
    texture_scale: int = 8

    def validate(self) -> "SyntheticSpec":
        if self.length < 2:
            raise ValueError("synthetic clips need at least two frames")
        h, w = self.canvas
        for k, obj in enumerate(self.objects):
            if obj.shape not in ("square", "disk"):
                raise ValueError(f"unknown shape kind {obj.shape!r}")
            for t in (0, self.length - 1):
                x = obj.position[0] + obj.velocity[0] * t
                y = obj.position[1] + obj.velocity[1] * t
                if x < 0 or y < 0 or x + obj.size > w or y + obj.size > h:
                    raise ValueError(f"object {k} exits the canvas at frame {t}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        objs = [SyntheticObject(**{**o, "velocity": tuple(o["velocity"]), "position": tuple(o["position"])})
                for o in d.pop("objects", [])]
        d["canvas"] = tuple(d.get("canvas", (64, 64)))
        return cls(objects=objs, **d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class SyntheticVideo(NamedTuple):
    """Rendered clip with exact backward flows.

    ``flows[t]`` warps frame ``t`` onto frame ``t + 1``; ``valid[t]`` marks
    pixels of frame ``t + 1`` whose source in frame ``t`` is not occluded.
    """

    clip: Clip
    flows: List[torch.Tensor]
    valid: List[torch.Tensor]
    spec: Optional["SyntheticSpec"] = None


def smooth_texture(rng: np.random.Generator, h: int, w: int, scale: int = 8) -> np.ndarray:
    """Band-limited colour texture (h, w, 3) in [0.1, 0.9]: coarse noise upsampled bicubically."""
    gh, gw = max(2, -(-h // scale) + 1), max(2, -(-w // scale) + 1)
    coarse = rng.uniform(0, 255, size=(gh, gw, 3)).astype(np.uint8)
    up = Image.fromarray(coarse).resize((gw * scale, gh * scale), Image.BICUBIC)
    arr = np.asarray(up, dtype=np.float32)[:h, :w] / 255.0
    return 0.1 + 0.8 * arr


def _shape_mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), bool)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[:size, :size]
    return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (xs - x0)[..., None]
    ay = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def gen_synthetic(spec: SyntheticSpec, rng: Optional[np.random.Generator] = None) -> SyntheticVideo:
    """Render a static textured background with rigidly translating textured objects.

    Objects are layered in list order (later objects on top). Rendering is a
    pure function of ``spec``: every texture comes from a seed stored in it,
    so ``rng`` is accepted but unused. Use :func:`random_spec` to randomise.
    """
    spec.validate()
    h, w = spec.canvas
    bg = smooth_texture(np.random.default_rng(spec.background), h, w, spec.texture_scale)
    sprites = []
    for obj in spec.objects:
        tex = smooth_texture(np.random.default_rng(obj.texture_seed), obj.size, obj.size,
                             max(2, spec.texture_scale // 2))
        sprites.append((tex, _shape_mask(obj.shape, obj.size)))

    frames = np.empty((spec.length, h, w, 3), np.float32)
    layer = np.zeros((spec.length, h, w), np.int32)  # 0 = background, k+1 = object k
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    for t in range(spec.length):
        img = bg.copy()
        for k, (obj, (tex, mask)) in enumerate(zip(spec.objects, sprites)):
            ox = obj.position[0] + obj.velocity[0] * t
            oy = obj.position[1] + obj.velocity[1] * t
            if float(ox).is_integer() and float(oy).is_integer():
                ox, oy = int(ox), int(oy)
                sl = (slice(oy, oy + obj.size), slice(ox, ox + obj.size))
                img[sl][mask] = tex[mask]
                layer[t][sl][mask] = k + 1
            else:
                u, v = xx - ox, yy - oy
                inside = (u >= 0) & (v >= 0) & (u <= obj.size - 1) & (v <= obj.size - 1)
                ui = np.clip(np.rint(u).astype(int), 0, obj.size - 1)
                vi = np.clip(np.rint(v).astype(int), 0, obj.size - 1)
                inside &= mask[vi, ui]
                vals = _sample_bilinear(tex, v, u)
                img[inside] = vals[inside]
                layer[t][inside] = k + 1
        frames[t] = img

    flows, valid = [], []
    for t in range(spec.length - 1):
        flow = np.zeros((2, h, w), np.float32)
        for k, obj in enumerate(spec.objects):
            sel = layer[t + 1] == k + 1
            flow[0][sel] = -obj.velocity[0]
            flow[1][sel] = -obj.velocity[1]
        sx = np.clip(np.rint(xx + flow[0]).astype(int), 0, w - 1)
        sy = np.clip(np.rint(yy + flow[1]).astype(int), 0, h - 1)
        ok = layer[t][sy, sx] == layer[t + 1]
        flows.append(torch.from_numpy(flow))
        valid.append(torch.from_numpy(ok))

    clip = Clip(torch.from_numpy(frames).permute(0, 3, 1, 2).contiguous(), source_id="synthetic")
    return SyntheticVideo(clip, flows, valid, spec)


def random_spec(
    rng: np.random.Generator,
    canvas: Tuple[int, int] = (64, 64),
    length: int = 7,
    n_objects: Tuple[int, int] = (1, 2),
    max_speed: int = 2,
    size_range: Tuple[int, int] = (12, 24),
    shapes: Sequence[str] = ("square", "disk"),
    texture_scale: int = 8,
) -> SyntheticSpec:
    """Random translation scene whose objects stay on the canvas for ``length`` frames."""
    h, w = canvas
    objs = []
    for _ in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        vx, vy = (int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        travel_x, travel_y = abs(vx) * (length - 1), abs(vy) * (length - 1)
        # shrink speed if the object cannot fit its travel
        while travel_x + size > w:
            vx -= int(np.sign(vx))
            travel_x = abs(vx) * (length - 1)
        while travel_y + size > h:
            vy -= int(np.sign(vy))
            travel_y = abs(vy) * (length - 1)
        x_lo = travel_x if vx < 0 else 0
        y_lo = travel_y if vy < 0 else 0
        x = int(rng.integers(x_lo, w - size - (travel_x if vx > 0 else 0) + 1))
        y = int(rng.integers(y_lo, h - size - (travel_y if vy > 0 else 0) + 1))
        objs.append(SyntheticObject(
            shape=str(rng.choice(list(shapes))), size=size,
            texture_seed=int(rng.integers(2**31)), velocity=(float(vx), float(vy)),
            position=(float(x), float(y)),
        ))
    return SyntheticSpec(canvas=canvas, length=length, background=int(rng.integers(2**31)), objects=objs,
                         texture_scale=texture_scale)


def synthetic_dataset(
    n_clips: int,
    seed: int,
    canvas: Tuple[int, int] = (64, 64),
    length: int = 7,
    **kwargs,
) -> List[SyntheticVideo]:
    """``n_clips`` random translation scenes from one seed."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        sv = gen_synthetic(random_spec(rng, canvas, length, **kwargs))
        sv.clip.source_id = f"synthetic-{seed}-{i:03d}"
        out.append(sv)
    return out
