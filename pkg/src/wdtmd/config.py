"""Run configuration: one dataclass per section, flat ``section.key = value`` text files.

Values are JSON literals (``1000``, ``0.012``, ``true``, ``[96, 64]``,
``"db6"``); a bare word that is not valid JSON is taken as a string.
Layering order: dataclass defaults, preset, config file, ``--section.key``
flags.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .image import PreprocessConfig
from .inpaint import InpaintConfig
from .sampler import SamplerConfig
from .schedule import ConditioningConfig
from .synth import SynthConfig
from .wavelet import SUPPORTED_BASES


@dataclass
class DataConfig:
    root: str = "data/synth"
    manifest: str = "manifest.csv"  # relative to root unless absolute

    def manifest_path(self) -> Path:
        m = Path(self.manifest)
        return m if m.is_absolute() else Path(self.root) / m


@dataclass
class WaveletConfig:
    basis: str = "db6"
    normalize: bool = False  # standardize each sub-band with training-set statistics


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    sampling_steps: int = 50


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 4
    lr_init: float = 1e-4
    lr_schedule: str = "cosine"  # cosine | constant
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    noise_encoding: bool = True  # tau
    pixel_supervision: bool = True  # psi
    flip_augment: bool = True
    val_every: int = 10
    select_from: int = 0  # first epoch eligible as the best checkpoint
    keep_checkpoints: int = 2


@dataclass
class ThresholdConfig:
    pixel: typing.Optional[float] = None  # None: choose by validation F1
    image: typing.Optional[float] = None


@dataclass
class DetectConfig:
    signed_residual: bool = False


@dataclass
class RunConfig:
    run_name: str = "desk"
    output_root: str = "runs"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    condition: ConditioningConfig = field(default_factory=ConditioningConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def run_dir(self) -> Path:
        root = os.environ.get("WDT_RUN_ROOT") or self.output_root
        return Path(root) / self.run_name

    def validate(self):
        if self.wavelet.basis not in SUPPORTED_BASES:
            raise ConfigError(f"wavelet.basis: unsupported basis {self.wavelet.basis!r}")
        if self.diffusion.sampling_steps > self.diffusion.T or self.diffusion.sampling_steps < 1:
            raise ConfigError("diffusion.sampling_steps must lie in 1..diffusion.T")
        self.condition.validate(self.diffusion.T)
        self.inpaint.validate()
        self.sampler.validate()
        w, h = self.preprocess.resize
        if w % 2 or h % 2:
            raise ConfigError(f"preprocess.resize must be even, got {self.preprocess.resize}")
        self.denoiser.validate((h // 2, w // 2))
        if self.train.epochs < 1 or self.train.batch_size < 1 or not self.train.lr_init > 0:
            raise ConfigError("train.epochs, train.batch_size must be >= 1 and train.lr_init > 0")
        if self.train.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"train.lr_schedule: unknown schedule {self.train.lr_schedule!r}")
        if self.train.val_every < 1:
            raise ConfigError("train.val_every must be >= 1")
        self.synth.validate()
        return self


# Desk-scale overrides: 96x64 synthetic corpus, small DiT, CPU-sized training.
DESK_PRESET = {
    "preprocess.resize": [96, 64],
    "wavelet.normalize": True,
    "denoiser.depth": 4,
    "denoiser.hidden_dim": 128,
    "denoiser.num_heads": 4,
    "denoiser.patch_size": 4,
    "denoiser.timestep_embed_dim": 128,
    "train.epochs": 250,
    "train.lr_init": 1e-3,
    "train.val_every": 25,
    "train.select_from": 250,  # validation AUC favours undertrained models; keep the final one
}
PRESETS = {"paper": {}, "desk": DESK_PRESET}


def _coerce(key: str, value, hint, current):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(key, value, inner, current)
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
                return value.lower() in ("true", "1", "yes")
            raise TypeError
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if hint is str:
            return str(value)
        if origin is tuple:
            if not isinstance(value, (list, tuple)) or len(value) != len(args):
                raise TypeError
            return tuple(_coerce(key, v, a, None) for v, a in zip(value, args))
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(hint, '__name__', hint)}") from None
    return value


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: RunConfig, key: str, value):
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
        if not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config key {key!r}")
    name = parts[-1]
    fields = {f.name: f for f in dataclasses.fields(target)}
    if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    hints = typing.get_type_hints(type(target))
    setattr(target, name, _coerce(key, value, hints[name], getattr(target, name)))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        set_key(cfg, key, value)
    return cfg


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip() if not line.strip().startswith('"') else line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_file(path) -> dict:
    try:
        return parse_text(Path(path).read_text(encoding="utf-8"), str(path))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


def flatten(cfg, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            out.update(flatten(val, key + "."))
        else:
            out[key] = list(val) if isinstance(val, tuple) else val
    return out


def dump_text(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    for key, val in flatten(cfg).items():
        lines.append(f"{key} = {json.dumps(val)}")
    return "\n".join(lines) + "\n"


def build_config(preset: str = "desk", files=(), overrides: dict | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = apply_overrides(RunConfig(), PRESETS[preset])
    for path in files:
        apply_overrides(cfg, load_file(path))
    apply_overrides(cfg, overrides or {})
    return cfg.validate()


def from_flat(flat: dict) -> RunConfig:
    return apply_overrides(RunConfig(), flat).validate()
