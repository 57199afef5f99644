"""Declarative run configuration (YAML) with dotted command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import Dataset, load_cifar_binary, synth_dataset
from .model import ArchConfig
from .routing import DEFAULT_TAU, ThresholdPolicy
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ArchitectureSection:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    nodes_per_stage: int = 6
    # wiring of static baseline runs; static_alpha and dynamic use the complete graph
    pattern: str = "res"
    pattern_params: dict = field(default_factory=dict)
    kernel_size: int = 3
    stage_stride: int = 2
    norm: str = "batch"
    fan_in_init: bool = True
    head_init_scale: float = 0.0
    alpha_init: float = 0.5
    dtype: str = "float32"


@dataclass
class RoutingSection:
    mode: str = "dynamic"
    router_init_std: float = 0.01
    router_init_bias: float = 0.0
    # "off": soft weights at eval; "fixed": thresholded, pruned inference with tau
    threshold: str = "off"
    tau: float = DEFAULT_TAU


@dataclass
class TrainingSection:
    epochs: int = 64
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    label_smoothing: float = 0.1
    warmup_epochs: float = 2
    seed: int = 0
    # seeds used by ablate and randwire-compare
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # evaluate every n steps during training (0: only at the end)
    eval_every: int = 0


@dataclass
class DatasetSection:
    # "synthetic" or "cifar"
    source: str = "synthetic"
    path: str = ""
    limit: int = 0
    num_classes: int = 4
    per_class: int = 200
    size: int = 16
    noise: float = 0.8
    seed: int = 0
    # held-out fraction when no separate eval file is given
    eval_fraction: float = 0.25
    eval_path: str = ""
    split_seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/default"
    sample_indices: list = field(default_factory=lambda: [0])


SECTIONS = {
    "architecture": ArchitectureSection,
    "routing": RoutingSection,
    "training": TrainingSection,
    "dataset": DatasetSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    architecture: ArchitectureSection = field(default_factory=ArchitectureSection)
    routing: RoutingSection = field(default_factory=RoutingSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, raw: dict | None) -> RunConfig:
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of sections")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, klass in SECTIONS.items():
            body = raw.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(klass)}
            bad = set(body) - known
            if bad:
                raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(sorted(bad))}")
            parts[name] = klass(**body)
        cfg = cls(**parts)
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self):
        """Fail early on values the downstream constructors would reject."""
        try:
            self.arch_config(self.dataset.num_classes, 3)
            self.train_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        if self.routing.threshold not in ("off", "fixed"):
            raise ConfigError(f"routing.threshold must be 'off' or 'fixed', got {self.routing.threshold!r}")
        if self.dataset.source not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'cifar', got {self.dataset.source!r}")
        if not 0.0 < self.dataset.eval_fraction < 1.0:
            raise ConfigError("dataset.eval_fraction must lie in (0,1)")
        if not self.training.seeds:
            raise ConfigError("training.seeds must list at least one seed")

    def arch_config(self, num_classes: int, in_channels: int) -> ArchConfig:
        a, r = self.architecture, self.routing
        return ArchConfig(in_channels=in_channels, num_classes=num_classes,
                          stage_channels=tuple(a.stage_channels), nodes_per_stage=a.nodes_per_stage,
                          pattern=a.pattern, pattern_params=dict(a.pattern_params), kernel_size=a.kernel_size,
                          stage_stride=a.stage_stride, router_init_std=r.router_init_std,
                          router_init_bias=r.router_init_bias, alpha_init=a.alpha_init,
                          fan_in_init=a.fan_in_init, head_init_scale=a.head_init_scale, norm=a.norm,
                          dtype=a.dtype)

    def train_config(self, mode: str | None = None, seed: int | None = None) -> TrainConfig:
        t = self.training
        return TrainConfig(mode=mode or self.routing.mode, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                           momentum=t.momentum, weight_decay=t.weight_decay, label_smoothing=t.label_smoothing,
                           warmup_epochs=t.warmup_epochs, seed=t.seed if seed is None else seed)

    def threshold_policy(self) -> ThresholdPolicy | None:
        if self.routing.threshold == "off":
            return None
        return ThresholdPolicy("fixed", self.routing.tau)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    raw = {k: dict(v or {}) for k, v in (raw or {}).items()}
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            parsed = yaml.safe_load(value) if value else ""
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse override value {value!r}: {e}") from None
        raw.setdefault(section, {})[name] = parsed
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
    return RunConfig.from_dict(apply_overrides(raw, list(overrides)))


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, eval) datasets described by the dataset section."""
    d = cfg.dataset
    if d.source == "synthetic":
        full = synth_dataset(d.num_classes, d.per_class, seed=d.seed, size=d.size, noise=d.noise)
    else:
        if not d.path:
            raise ConfigError("dataset.path is required for source 'cifar'")
        full = load_cifar_binary(d.path, limit=d.limit or None)
        if d.eval_path:
            return full, load_cifar_binary(d.eval_path, limit=d.limit or None)
    n_eval = max(1, int(round(d.eval_fraction * len(full))))
    return full.split(n_eval, seed=d.split_seed)


def replace_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
