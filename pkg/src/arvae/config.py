"""Run configuration: one JSON document, strictly validated, echoed into every output directory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .model import ArvaeConfig, desk_config, paper_variant
from .training import LossWeights, OptimizerConfig, StagePlan, desk_plan

MODEL_PRESETS = {
    "desk": desk_config,
    "paper8": lambda **kw: paper_variant(8, **kw),
    "paper16": lambda **kw: paper_variant(16, **kw),
    "paper32": lambda **kw: paper_variant(32, **kw),
}


def _strict(cls, d: Optional[dict], where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    for f in fields(cls):
        if f.name in d and isinstance(d[f.name], list) and "Tuple" in str(f.type):
            d[f.name] = tuple(d[f.name])
    return cls(**d)


@dataclass
class DataConfig:
    clips: int = 8
    seed: int = 1
    canvas: Tuple[int, int] = (64, 64)
    length: int = 7
    max_speed: int = 2
    n_objects: Tuple[int, int] = (1, 2)
    texture_scale: int = 16
    paths: List[str] = field(default_factory=list)
    val_clips: int = 16
    val_seed: int = 1000
    val_length: int = 7
    val_paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.clips < 0 or self.val_clips < 0:
            raise ValueError("clip counts must be nonnegative")
        if self.length < 2 or self.val_length < 2:
            raise ValueError("synthetic clips need at least two frames")


@dataclass
class TrainConfig:
    plan: StagePlan = field(default_factory=desk_plan)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ssim_weight: float = 0.5
    perceptual_weight: float = 0.0
    perceptual_scorer: Optional[str] = None  # "package.module:callable"
    first_frame_weight: float = 1.0
    first_frame_steps: int = 2000
    freeze_first_frame: bool = False

    def loss_weights(self) -> LossWeights:
        scorer = load_callable(self.perceptual_scorer) if self.perceptual_scorer else None
        return LossWeights(self.ssim_weight, self.perceptual_weight, scorer, self.first_frame_weight)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["plan"] = self.plan.to_dict()
        d["optimizer"] = asdict(self.optimizer)
        return d

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        d = dict(d or {})
        plan = StagePlan.from_dict(d.pop("plan")) if "plan" in d else desk_plan()
        opt = OptimizerConfig.from_dict(d.pop("optimizer", {}))
        cfg = _strict(cls, d, "training")
        cfg.plan, cfg.optimizer = plan, opt
        return cfg


@dataclass
class IOConfig:
    out: str = "runs/default"
    seed: Optional[int] = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.deterministic and self.seed is None:
            raise ValueError("a seed is mandatory in deterministic mode")


@dataclass
class RunConfig:
    model: ArvaeConfig = field(default_factory=desk_config)
    model_preset: str = "desk"
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    io: IOConfig = field(default_factory=IOConfig)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"model", "training", "data", "io"}
        if unknown:
            raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
        m = dict(d.get("model") or {})
        preset = m.pop("preset", "desk")
        if preset not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
        base = MODEL_PRESETS[preset]().to_dict()
        unknown = set(m) - set(base)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        model = ArvaeConfig.from_dict({**base, **m})
        return cls(
            model=model,
            model_preset=preset,
            training=TrainConfig.from_dict(d.get("training")),
            data=_strict(DataConfig, d.get("data"), "data"),
            io=_strict(IOConfig, d.get("io"), "io"),
        )

    def to_dict(self) -> dict:
        return {
            "model": {"preset": self.model_preset, **self.model.to_dict()},
            "training": self.training.to_dict(),
            "data": asdict(self.data),
            "io": asdict(self.io),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def override(self, seed: Optional[int] = None, deterministic: Optional[bool] = None,
                 out: Optional[str] = None) -> "RunConfig":
        """Apply command-line flags; flags win over the file."""
        io = asdict(self.io)
        if seed is not None:
            io["seed"] = seed
        if deterministic:
            io["deterministic"] = True
        if out is not None:
            io["out"] = out
        self.io = IOConfig(**io)
        return self


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return RunConfig.from_dict(json.load(f))


def load_callable(spec: str):
    import importlib

    mod, _, attr = spec.partition(":")
    if not attr:
        raise ValueError(f"callable spec {spec!r} must look like 'module:name'")
    return getattr(importlib.import_module(mod), attr)
