"""Single JSON run configuration covering every stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .dataset import PreprocessConfig, SynthConfig
from .objective import ObjectiveConfig
from .views import MASK_STRATEGIES, PHYSIO_PRESETS, AugParams

SECTIONS = ("data", "views", "tokenizer", "encoder", "objective", "trainer", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    atlas: Optional[str] = None


@dataclass
class ViewsConfig:
    t_crop: int = 100
    corruption: bool = True
    tau_c_max: float = 0.1
    tau_t_max: float = 0.3
    tau_sigma: float = 0.1
    tau_s_range: Tuple[float, float] = (0.8, 1.2)
    physio_kind: Optional[str] = None
    physio_intensity: str = "light"
    mask_strategy: str = "slice"
    mask_ratio: Tuple[float, float] = (0.65, 0.85)

    def __post_init__(self):
        self.tau_s_range = tuple(self.tau_s_range)
        self.mask_ratio = tuple(self.mask_ratio)
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"views.mask_strategy must be one of {MASK_STRATEGIES}")
        if self.physio_kind is not None and self.physio_kind not in PHYSIO_PRESETS:
            raise ConfigError(f"views.physio_kind must be null or one of {sorted(PHYSIO_PRESETS)}")
        self.aug_params()

    def aug_params(self) -> AugParams:
        return AugParams(self.tau_c_max, self.tau_t_max, self.tau_sigma, self.tau_s_range)


@dataclass
class TokenizerConfig:
    kind: str = "semantic"
    dim: int = 768
    patch_len: int = 20
    std_kernel: int = 3
    base_len: int = 4
    scales: int = 3
    feedthrough_init: float = 0.5
    structured_init_std: float = 0.02

    def __post_init__(self):
        if self.kind not in ("semantic", "roi_linear"):
            raise ConfigError(f"tokenizer.kind must be 'semantic' or 'roi_linear', got {self.kind!r}")
        if self.dim % 2:
            raise ConfigError("tokenizer.dim must be even")


@dataclass
class EncoderConfig:
    depth: int = 8
    heads: int = 8
    mlp_ratio: float = 4.0
    layer_scale_init: float = 0.1
    head_hidden: int = 1024
    head_layers: int = 2


@dataclass
class TrainerConfig:
    epochs: int = 100
    batch_size: int = 512
    base_lr: float = 7e-4
    warmup_fraction: float = 0.03
    wd_start: float = 0.05
    wd_end: float = 0.3
    momentum_start: float = 0.99
    momentum_end: float = 0.9999
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    checkpoint_every: int = 10
    n_train_scans: Optional[int] = None
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 2:
            raise ConfigError("trainer.batch_size must be >= 2 (coding rate needs a covariance)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("trainer.dtype must be 'float32' or 'float64'")


@dataclass
class EvalConfig:
    label: str = "label"
    n_crops: int = 8
    learning_rates: Tuple[float, ...] = (0.03, 0.01, 0.003, 0.001, 0.0003, 0.0001)
    epochs: int = 50
    momentum: float = 0.9
    max_batch: int = 256
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.learning_rates = tuple(self.learning_rates)
        self.split = tuple(self.split)
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3:
            raise ConfigError("eval.split must be three fractions summing to 1")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    views: ViewsConfig = field(default_factory=ViewsConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub is not None else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "views"): ViewsConfig,
    (RunConfig, "tokenizer"): TokenizerConfig,
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "objective"): ObjectiveConfig,
    (RunConfig, "trainer"): TrainerConfig,
    (RunConfig, "eval"): EvalConfig,
    (DataConfig, "synth"): SynthConfig,
    (DataConfig, "preprocess"): PreprocessConfig,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def config_from_dict(raw: dict, require_sections: bool = True) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if require_sections:
        missing = [s for s in SECTIONS if s not in raw]
        if missing:
            raise ConfigError(f"missing config section(s): {', '.join(missing)}")
    return _build(RunConfig, raw, "config")


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def toy_config(**overrides) -> RunConfig:
    """Small desk-scale configuration used by tests and the example configs."""
    cfg = RunConfig()
    cfg.tokenizer.dim = 64
    cfg.encoder.depth = 2
    cfg.encoder.heads = 4
    cfg.encoder.head_hidden = 128
    cfg.objective.d_proj = 32
    cfg.trainer.batch_size = 32
    cfg.trainer.epochs = 30
    cfg.trainer.checkpoint_every = 10
    return override(cfg, **overrides)


def override(cfg: RunConfig, **overrides) -> RunConfig:
    """Set dotted keys in place, e.g. ``override(cfg, **{"trainer.epochs": 5})``."""
    for key, value in overrides.items():
        *parents, name = key.split(".")
        obj = cfg
        for p in parents:
            obj = getattr(obj, p)
        if not hasattr(obj, name):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, value)
    return cfg
