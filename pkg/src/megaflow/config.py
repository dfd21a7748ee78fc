"""Model, loss and training configuration, plus the INI-style config file."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class ModelConfig:
    patch_size: int = 8
    token_dim: int = 128
    num_blocks: int = 4
    num_heads: int = 4
    fuse_dim: int = 128
    global_stride: int = 8
    refine_stride: int = 4
    corr_radius: int = 4
    hidden_dim: int = 96
    motion_dim: int = 64
    cnn_dims: tuple = (32, 64)
    temporal_heads: int = 2
    train_iters: int = 4
    eval_iters: int = 8
    # None means sqrt(fuse_dim); 1.0 gives the unscaled softmax.
    temperature: float | None = None
    tap_blocks: tuple | None = None
    mlp_ratio: float = 2.0
    global_attention: bool = True
    temporal_attention: bool = True
    zero_hidden_init: bool = False

    def __post_init__(self):
        self.cnn_dims = tuple(self.cnn_dims)
        if isinstance(self.tap_blocks, int):
            self.tap_blocks = (self.tap_blocks,)
        elif self.tap_blocks is not None:
            self.tap_blocks = tuple(self.tap_blocks)
        self.validate()

    def validate(self):
        if self.refine_stride != 4:
            raise ValueError("refine_stride is fixed at 4")
        if self.patch_size % 4:
            raise ValueError(f"patch_size {self.patch_size} must be a multiple of 4")
        if self.global_stride % self.refine_stride:
            raise ValueError(f"global_stride {self.global_stride} must be a multiple of 4")
        if self.corr_radius < 0:
            raise ValueError("corr_radius must be >= 0")
        if not 1 <= self.train_iters <= self.eval_iters:
            raise ValueError("need 1 <= train_iters <= eval_iters")
        if self.token_dim % self.num_heads or self.hidden_dim % self.temporal_heads:
            raise ValueError("attention widths must divide by their head counts")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for b in self.taps:
            if not 0 <= b < self.num_blocks:
                raise ValueError(f"tap block {b} outside 0..{self.num_blocks - 1}")

    @property
    def taps(self) -> tuple:
        """Block indices whose outputs feed the fusion head."""
        if self.tap_blocks is not None:
            return self.tap_blocks
        # the large model taps 4 of 24 blocks; keep the same relative depths
        picks = sorted({min(self.num_blocks - 1, round(f * self.num_blocks)) for f in (3 / 24, 10 / 24, 16 / 24, 22 / 24)})
        return tuple(picks)

    @property
    def softmax_temperature(self) -> float:
        return math.sqrt(self.fuse_dim) if self.temperature is None else self.temperature

    @property
    def input_multiple(self) -> int:
        """Image sides must be multiples of this."""
        return math.lcm(self.patch_size, 4, self.global_stride)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """The desk-scale configuration used for the end-to-end training run."""
        base = dict(
            patch_size=8, token_dim=32, num_blocks=2, num_heads=2, fuse_dim=32,
            global_stride=8, corr_radius=3, hidden_dim=32, motion_dim=32,
            cnn_dims=(16, 32), temporal_heads=2,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class LossConfig:
    gamma: float = 0.9
    smooth_beta: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.smooth_beta <= 0:
            raise ValueError("smooth_beta must be positive")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup_fraction: float = 0.05
    min_frames: int = 2
    max_frames: int = 6
    # leading fraction of steps trained on 2-frame clips before variable length
    two_frame_fraction: float = 0.25
    # learning-rate multiplier for the attention blocks
    transformer_lr_ratio: float = 1.0
    crop_size: int = 32
    max_displacement: float = 8.0
    warp_kind: str = "translation"
    # fraction of steps trained frame-0-anchored with the point loss
    track_fraction: float = 0.25
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    data_workers: int = 0
    check_clipping: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.min_frames < 2 or self.max_frames < self.min_frames:
            raise ValueError("need 2 <= min_frames <= max_frames")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class DataConfig:
    """Synthetic dataset generation (``gen-data``)."""
    count: int = 64
    seed: int = 0
    min_frames: int = 2
    max_frames: int = 6
    size: int = 32
    max_displacement: float = 8.0
    warp_kind: str = "translation"
    cap_mode: str = "consecutive"

    def __post_init__(self):
        if self.min_frames < 2 or self.max_frames < self.min_frames:
            raise ValueError("need 2 <= min_frames <= max_frames")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass
class EvalConfig:
    # frames fed per sequence; None uses every frame of the sequence
    frames: int | None = 4
    # refinement iterations; None uses the model's eval_iters
    iters: int | None = None
    window_size: int = 8
    render: bool = False

    def __post_init__(self):
        if self.frames is not None and self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig, "data": DataConfig, "eval": EvalConfig}


def _parse(value: str, default):
    value = value.strip()
    if value.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple) or "," in value:
        return tuple(int(v) for v in value.strip("()[] ").split(",") if v.strip())
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        try:
            return int(value) if default is None and value.lstrip("-").isdigit() else float(value)
        except ValueError:
            return value
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def field_defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def read_sections(path=None) -> dict:
    """Raw ``{section: {key: value}}`` overrides from a key = value file."""
    values = {name: {} for name in SECTIONS}
    if path is None:
        return values
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    for name in parser.sections():
        if name not in SECTIONS:
            raise KeyError(f"unknown section [{name}]")
        defaults = field_defaults(SECTIONS[name])
        for key, raw in parser.items(name):
            if key not in defaults or key == "loss":
                raise KeyError(f"unknown key {name}.{key}")
            values[name][key] = _parse(raw, defaults[key])
    return values


def build_configs(values: dict) -> dict:
    """Config objects from section overrides; the model starts from the toy preset."""
    return {
        "model": ModelConfig.toy(**values.get("model", {})),
        "train": TrainConfig(**values.get("train", {}), loss=LossConfig(**values.get("loss", {}))),
        "data": DataConfig(**values.get("data", {})),
        "eval": EvalConfig(**values.get("eval", {})),
    }


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Model and training config from the ``[model]``, ``[train]`` and ``[loss]`` sections."""
    cfgs = build_configs(read_sections(path))
    return cfgs["model"], cfgs["train"]


def save_config(path, model: ModelConfig, train: TrainConfig, data=None, evaluation=None):
    parser = configparser.ConfigParser()
    objs = [("model", model), ("train", train), ("loss", train.loss)]
    objs += [(n, o) for n, o in (("data", data), ("eval", evaluation)) if o is not None]
    for name, obj in objs:
        parser[name] = {
            f.name: _format(getattr(obj, f.name))
            for f in fields(obj)
            if f.name != "loss"
        }
    with open(Path(path), "w") as fh:
        parser.write(fh)
