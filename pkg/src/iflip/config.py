"""Run configuration: nested dataclasses, strict dict/TOML/JSON loading, hashing.

Every tunable of the pipeline lives here so that ablation suites can mutate
nested keys reproducibly and a config hash pins a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:  # py3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml


class ConfigError(ValueError):
    """Invalid configuration; `field_path` names the offending key."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


HEAD_MODES = ("frozen_lm", "cls_head")

# Named model variants -> (content branch, style branch, cue generator, binary question)
VARIANTS = {
    "full": (True, True, True, False),
    "no_cue": (True, True, False, False),
    "cb_only": (True, False, False, False),
    "sb_only": (False, True, False, False),
    "baseline": (False, False, False, False),
    "no_style": (True, False, True, True),
    "cls_head": (True, True, True, False),
}


@dataclass
class DataConfig:
    image_size: int = 32
    n_train: int = 2000
    n_eval: int = 400
    n_targets: int = 4
    granularity: int = 3
    balanced: bool = True
    base_seed: int = 0
    domain_name: str = "meta"

    def validate(self, path: str = "data") -> None:
        if self.image_size < 8:
            raise ConfigError(f"{path}.image_size", "must be >= 8")
        if self.n_train <= 0:
            raise ConfigError(f"{path}.n_train", "must be > 0")
        if self.n_eval <= 0:
            raise ConfigError(f"{path}.n_eval", "must be > 0")
        if self.n_targets < 1:
            raise ConfigError(f"{path}.n_targets", "must be >= 1")
        if self.granularity not in (1, 2, 3):
            raise ConfigError(f"{path}.granularity", "must be in {1, 2, 3}")


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    width: int = 32
    heads: int = 4

    def validate(self, path: str = "encoder") -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"{path}.patch_size", "image_size must be divisible by patch_size")
        if self.depth < 2:
            raise ConfigError(f"{path}.depth", "must be >= 2")
        if self.width % self.heads != 0:
            raise ConfigError(f"{path}.heads", "width must be divisible by heads")


@dataclass
class QFormerConfig:
    depth: int = 2
    heads: int = 4
    queries: int = 4
    width: int = 32
    ffn_mult: int = 4

    def validate(self, path: str = "qformer") -> None:
        if self.depth < 1:
            raise ConfigError(f"{path}.depth", "must be >= 1")
        if self.queries < 2:
            raise ConfigError(f"{path}.queries", "must be >= 2 (fusion needs a cue token)")
        if self.width % self.heads != 0:
            raise ConfigError(f"{path}.heads", "width must be divisible by heads")


@dataclass
class TinyLMConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 96
    max_answer_len: int = 12
    pretrain_steps: int = 6000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    target_acc: float = 0.99
    pretrain_seed: int = 0

    def validate(self, path: str = "lm") -> None:
        if self.width % self.heads != 0:
            raise ConfigError(f"{path}.heads", "width must be divisible by heads")
        if self.depth < 1:
            raise ConfigError(f"{path}.depth", "must be >= 1")
        if not 0.0 < self.target_acc <= 1.0:
            raise ConfigError(f"{path}.target_acc", "must be in (0, 1]")


@dataclass
class FusionConfig:
    cue_grid: int = 16
    cue_channels: int = 8
    noise_scale: float = 0.1
    beta: float = 0.5
    cue_smooth_continuous: bool = False

    def validate(self, path: str = "fusion") -> None:
        if self.cue_grid < 2:
            raise ConfigError(f"{path}.cue_grid", "must be >= 2")
        if self.beta <= 0:
            raise ConfigError(f"{path}.beta", "must be > 0")


@dataclass
class LossWeights:
    content: float = 0.4
    style: float = 0.4
    cls: float = 0.15
    cue: float = 0.05

    def validate(self, path: str = "weights") -> None:
        for name in ("content", "style", "cls", "cue"):
            v = getattr(self, name)
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise ConfigError(f"{path}.{name}", "must be a finite nonnegative real")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1e-4
    peak_lr: float = 5e-4
    weight_decay: float = 1e-6
    warmup_frac: float = 0.3
    final_lr_frac: float = 0.1
    seed: int = 0
    replicates: int = 3
    head_mode: str = "frozen_lm"
    variant: str = "full"
    style_prompt_count: int = 3
    divergence_factor: float = 10.0
    divergence_patience: int = 200

    def validate(self, path: str = "train") -> None:
        if self.epochs < 1:
            raise ConfigError(f"{path}.epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size", "must be >= 1")
        if self.peak_lr < self.base_lr:
            raise ConfigError(f"{path}.peak_lr", "must be >= base_lr")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"{path}.warmup_frac", "must be in (0, 1)")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"{path}.head_mode", f"must be one of {HEAD_MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"{path}.variant", f"must be one of {tuple(VARIANTS)}")
        if self.style_prompt_count not in (1, 2, 3):
            raise ConfigError(f"{path}.style_prompt_count", "must be in {1, 2, 3}")
        if self.replicates < 1:
            raise ConfigError(f"{path}.replicates", "must be >= 1")


@dataclass
class EvalConfig:
    hter_policy: str = "eer"
    fixed_tau: float = 0.5
    target_fpr: float = 0.01
    tpr_interpolate: bool = True
    answer_eval_n: int = 256

    def validate(self, path: str = "eval") -> None:
        if self.hter_policy not in ("eer", "fixed"):
            raise ConfigError(f"{path}.hter_policy", "must be 'eer' or 'fixed'")
        if not 0.0 < self.target_fpr < 1.0:
            raise ConfigError(f"{path}.target_fpr", "must be in (0, 1)")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    lm: TinyLMConfig = field(default_factory=TinyLMConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> None:
        self.data.validate()
        self.encoder.validate()
        self.qformer.validate()
        self.lm.validate()
        self.fusion.validate()
        self.weights.validate()
        self.train.validate()
        self.eval.validate()
        if self.encoder.image_size != self.data.image_size:
            raise ConfigError("encoder.image_size", "must match data.image_size")
        if self.qformer.width != self.encoder.width:
            raise ConfigError("qformer.width", "must match encoder.width")
        cb, sb, cue, binary = VARIANTS[self.train.variant]
        if binary and sb:
            raise ConfigError("train.variant", "binary question mode excludes the style branch")
        if cue and not (cb or sb):
            raise ConfigError("train.variant", "cue generator requires at least one branch")

    # -- variant toggles -----------------------------------------------------

    def toggles(self) -> "ModelToggles":
        cb, sb, cue, binary = VARIANTS[self.train.variant]
        head = "cls_head" if self.train.variant == "cls_head" else self.train.head_mode
        return ModelToggles(
            content_branch=cb,
            style_branch=sb,
            cue=cue,
            binary=binary,
            head_mode=head,
            style_prompt_count=self.train.style_prompt_count,
        )

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ModelToggles:
    content_branch: bool
    style_branch: bool
    cue: bool
    binary: bool
    head_mode: str
    style_prompt_count: int


_SECTION_TYPES = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "qformer": QFormerConfig,
    "lm": TinyLMConfig,
    "fusion": FusionConfig,
    "weights": LossWeights,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build_section(cls, raw: dict, path: str):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown key")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(path, str(e)) from e


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    """Build a validated RunConfig from a plain dict; unknown keys are rejected."""
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(key, "must be a table/object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key in ("seed", "out_dir"):
            kwargs[key] = value
        else:
            raise ConfigError(key, "unknown key")
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Load a RunConfig from a TOML or JSON file (detected by suffix, then content)."""
    p = Path(path)
    data = p.read_bytes()
    if p.suffix.lower() == ".json":
        raw = json.loads(data)
    elif p.suffix.lower() == ".toml":
        raw = _toml.loads(data.decode())
    else:
        try:
            raw = json.loads(data)
        except json.JSONDecodeError:
            raw = _toml.loads(data.decode())
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config root must be a table/object")
    return config_from_dict(raw)


def flat_defaults() -> list[tuple[str, Any]]:
    """Flattened (key, default) pairs for --help output."""
    pairs: list[tuple[str, Any]] = []
    cfg = RunConfig()
    for section, obj in (("", cfg),):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    pairs.append((f"{f.name}.{g.name}", getattr(value, g.name)))
            else:
                pairs.append((f.name, value))
    return pairs
