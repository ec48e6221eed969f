"""Typed configuration records with strict (unknown-key-rejecting) loading."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .datagen import SyntheticSpec
from .errors import ValidationError

CONFIG_VERSION = 1

VARIANTS = ("baseline_frozen", "moe_rep", "moe_ada", "moe_task", "mamol")


@dataclass
class ModelConfig:
    variant: str = "mamol"
    num_layers: int = 4
    d_model: int = 32
    d_ff: int = 64
    num_heads: int = 4
    # 1-based indices of blocks whose feed-forward output receives experts
    injection_layers: list[int] = field(default_factory=lambda: [3, 4])
    trunk_mode: str = "shared"
    init_seed: int = 0
    ln_eps: float = 1e-5
    substitution: str = "zero_fill"
    # mamol
    lora_rank: int = 4
    num_dynamic_experts: int = 2
    top_k: int = 1
    d_router: Optional[int] = None
    routing_granularity: str = "token"
    pattern_encoding: str = "bitmask"
    static_gate_rule: str = "present"
    # raw top-K softmax values; "renormalize" rescales selected gates to sum to 1
    gate_normalization: str = "raw"
    use_dynamic: bool = True
    use_shared: bool = True
    use_modality_specific: bool = True
    balance_loss_coef: float = 0.0
    # comparison variants
    ada_num_experts: int = 2
    ada_top_k: int = 2
    ada_bottleneck: int = 8
    task_num_experts: int = 3
    task_top_k: int = 1
    task_hidden: int = 16
    rep_num_experts: int = 2
    rep_top_k: int = 2
    rep_rank: int = 4
    rep_recon_weight: float = 1.0
    # let the task loss reach the estimator through its substituted output
    rep_task_gradient: bool = False

    def __post_init__(self):
        _choice("model.variant", self.variant, VARIANTS)
        _choice("model.trunk_mode", self.trunk_mode, ("shared", "per_modality"))
        _choice("model.substitution", self.substitution, ("zero_fill", "learnable_placeholder"))
        _choice("model.routing_granularity", self.routing_granularity, ("token", "sample"))
        _choice("model.pattern_encoding", self.pattern_encoding, ("bitmask", "onehot"))
        _choice("model.static_gate_rule", self.static_gate_rule, ("present", "absent", "always"))
        _choice("model.gate_normalization", self.gate_normalization, ("renormalize", "raw"))
        if min(self.num_layers, self.d_model, self.d_ff, self.num_heads) < 1:
            raise ValidationError("model sizes must be positive")
        if self.d_model % self.num_heads:
            raise ValidationError("d_model must be divisible by num_heads")
        if any(not 1 <= i <= self.num_layers for i in self.injection_layers):
            raise ValidationError(f"injection_layers must lie in 1..{self.num_layers}")
        if len(set(self.injection_layers)) != len(self.injection_layers):
            raise ValidationError("injection_layers contains duplicates")
        if self.variant != "baseline_frozen" and self.variant != "moe_rep" and not self.injection_layers:
            raise ValidationError("injection_layers must be nonempty when experts are enabled")
        if not 1 <= self.lora_rank <= self.d_model // 2:
            raise ValidationError("lora_rank must satisfy 1 <= r <= d_model / 2")
        for n, k, name in (
            (self.num_dynamic_experts, self.top_k, "top_k"),
            (self.ada_num_experts, self.ada_top_k, "ada_top_k"),
            (self.task_num_experts, self.task_top_k, "task_top_k"),
            (self.rep_num_experts, self.rep_top_k, "rep_top_k"),
        ):
            if n < 1 or not 1 <= k <= n:
                raise ValidationError(f"model.{name} must lie in 1..number of experts")
        if self.rep_rank < 1 or self.ada_bottleneck < 1 or self.task_hidden < 1:
            raise ValidationError("rep_rank, ada_bottleneck and task_hidden must be positive")
        if self.d_router is not None and self.d_router < 1:
            raise ValidationError("d_router must be positive")

    @property
    def router_dim(self) -> int:
        return self.d_router if self.d_router is not None else max(1, self.d_model // 2)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    weight_decay: float = 2e-2
    warmup_fraction: float = 0.10
    epochs: int = 15
    # overrides epochs when set
    total_steps: Optional[int] = None
    batch_size: int = 32
    seed: int = 0
    grad_clip: Optional[float] = None
    decay_mode: str = "decoupled"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValidationError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValidationError("total_steps must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        _choice("train.decay_mode", self.decay_mode, ("decoupled", "coupled"))


@dataclass
class MissingConfig:
    """How a split loses modalities: ``both``/``only`` use ``eta``, ``availability`` uses per-modality shares."""

    mode: str = "both"
    eta: float = 0.0
    modality: Optional[int] = None
    availability: Optional[list[float]] = None
    split_rule: str = "uniform"

    def __post_init__(self):
        _choice("missing.mode", self.mode, ("both", "only", "availability"))
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError("missing.eta must lie in [0, 1]")
        if self.mode == "only" and self.modality is None:
            raise ValidationError("missing.mode 'only' needs missing.modality")
        if self.mode == "availability" and self.availability is None:
            raise ValidationError("missing.mode 'availability' needs missing.availability")
        _choice("missing.split_rule", self.split_rule, ("uniform", "paper"))


@dataclass
class DataConfig:
    source: str = "synthetic"
    manifest: Optional[str] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_fraction: float = 0.8
    split_seed: int = 0
    train_missing: MissingConfig = field(default_factory=lambda: MissingConfig(eta=0.7))
    test_missing: MissingConfig = field(default_factory=lambda: MissingConfig(eta=0.7))

    def __post_init__(self):
        _choice("data.source", self.source, ("synthetic", "manifest"))
        if self.source == "manifest" and not self.manifest:
            raise ValidationError("data.source 'manifest' needs data.manifest")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("data.train_fraction must lie in (0, 1)")


@dataclass
class GridConfig:
    missing_rates: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    # per rate: which splits to run, see evalkit.table_splits
    splits: list[str] = field(default_factory=lambda: ["miss_1", "miss_0", "both"])
    variants: list[str] = field(default_factory=lambda: ["moe_rep", "moe_ada", "moe_task", "mamol"])
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        for v in self.variants:
            _choice("eval.grid.variants", v, VARIANTS)


@dataclass
class AblationConfig:
    missing_rates: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class GeneralizationConfig:
    train_mode: str = "both"
    train_eta: float = 0.7
    test_mode: str = "both"
    test_etas: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    modality: Optional[int] = None
    variants: list[str] = field(default_factory=lambda: ["baseline_frozen", "mamol"])
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class EvalConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    generalization: GeneralizationConfig = field(default_factory=GeneralizationConfig)


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ValidationError(f"config_version must be {CONFIG_VERSION}, got {self.config_version}")


def _choice(name: str, value, allowed) -> None:
    if value not in allowed:
        raise ValidationError(f"{name} must be one of {list(allowed)}, got {value!r}")


# ---------------------------------------------------------------------------
# strict dict <-> dataclass conversion


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValidationError(f"{path}: expected a mapping")
        return from_dict(tp, value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{path}: expected a list")
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict[str, Any], path: str = ""):
    """Build ``cls`` from a plain mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "<root>"
        raise ValidationError(f"unknown config key(s) under {where}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{path or '<root>'}: {exc}") from exc


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def apply_override(raw: dict[str, Any], assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise ValidationError(f"override {key!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = yaml.safe_load(text)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: cannot parse config ({exc})") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        raw = loaded or {}
    for assignment in overrides or []:
        apply_override(raw, assignment)
    return from_dict(RunConfig, raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
