"""Run configuration: sectioned documents, presets, env overrides and hashing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .distill import DistillConfig
from .errors import ConfigError, ParameterError

BASELINES = ("none", "finetune", "logit_kd")
TRAINER_PRESETS = ("desk", "paper")

# Hyperparameters per preset; "paper" is the full-scale schedule.
PRESET_VALUES = {
    "paper": {
        "trainer": {"epochs_per_task": 90, "base_lr": 0.1, "lr_decay_epochs": 30,
                    "lr_decay_factor": 0.1, "batch_size": 128, "weight_decay": 1e-4,
                    "momentum": 0.9, "seed": 1993},
        "model": {"backbone": "resnet18"},
        "method": {"memory_budget": 20},
    },
    "desk": {
        "trainer": {"epochs_per_task": 20, "base_lr": 0.05, "lr_decay_epochs": 8,
                    "lr_decay_factor": 0.1, "batch_size": 32, "weight_decay": 1e-4,
                    "momentum": 0.9, "seed": 0},
        "model": {"backbone": "small_cnn"},
        "method": {"memory_budget": 5},
    },
}


@dataclass
class DatasetSection:
    train_manifest: str = ""
    test_manifest: str = ""
    root: str = ""
    image_size: int = 32
    tasks_file: str = ""


@dataclass
class TasksSection:
    num_tasks: int = 5
    split_rule: str = "even_plus_remainder_first"
    counts: list | None = None
    preset: str = ""
    seed: int = 0


@dataclass
class ModelSection:
    backbone: str = "small_cnn"
    widths: list = field(default_factory=lambda: [32, 64, 128, 128])
    predictor_noise: float = 0.01


@dataclass
class MethodSection:
    use_fkd: bool = True
    use_cam_cutmix: bool = True
    use_balanced_softmax: bool = True
    baseline: str = "none"
    bs_variant: str = "paper"
    selector: str = "herding"
    memory_budget: int = 20
    distill: dict = field(default_factory=lambda: {"mode": "feature_cosine", "temperature": 2.0,
                                                   "alpha": 0.5})

    @property
    def uses_memory(self) -> bool:
        return self.baseline != "finetune"

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**self.distill)


@dataclass
class TrainerSection:
    preset: str = "desk"
    epochs_per_task: int = 20
    base_lr: float = 0.05
    lr_decay_epochs: int = 8
    lr_decay_factor: float = 0.1
    batch_size: int = 32
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    deterministic: bool = True
    augment: bool = True
    num_threads: int = 1


@dataclass
class OutputSection:
    out_dir: str = "runs/default"
    checkpoints: bool = True
    dump_synthetics: bool = False


SECTIONS = {
    "dataset": DatasetSection,
    "tasks": TasksSection,
    "model": ModelSection,
    "method": MethodSection,
    "trainer": TrainerSection,
    "output": OutputSection,
}
DISTILL_KEYS = {f.name for f in dataclasses.fields(DistillConfig)}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    tasks: TasksSection = field(default_factory=TasksSection)
    model: ModelSection = field(default_factory=ModelSection)
    method: MethodSection = field(default_factory=MethodSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (the output section is excluded)."""
        doc = self.to_dict()
        doc.pop("output")
        return config_digest(doc)

    def validate(self):
        t, m = self.trainer, self.method
        if t.preset not in TRAINER_PRESETS:
            raise ConfigError(f"trainer.preset must be one of {TRAINER_PRESETS}")
        for name in ("epochs_per_task", "batch_size", "lr_decay_epochs", "num_threads"):
            if getattr(t, name) < 1:
                raise ConfigError(f"trainer.{name} must be positive")
        if not t.base_lr > 0:
            raise ConfigError("trainer.base_lr must be positive")
        if not 0 < t.lr_decay_factor < 1:
            raise ConfigError("trainer.lr_decay_factor must lie in (0, 1)")
        if t.weight_decay < 0 or t.momentum < 0:
            raise ConfigError("trainer.weight_decay and trainer.momentum must be >= 0")
        if m.memory_budget < 1:
            raise ConfigError("method.memory_budget must be positive")
        if m.baseline not in BASELINES:
            raise ConfigError(f"method.baseline must be one of {BASELINES}")
        if m.bs_variant not in ("paper", "log_count"):
            raise ConfigError("method.bs_variant must be 'paper' or 'log_count'")
        if m.selector not in ("herding", "random"):
            raise ConfigError("method.selector must be 'herding' or 'random'")
        unknown = set(m.distill) - DISTILL_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) in method.distill: {sorted(unknown)}")
        try:
            m.distill_config()
        except ParameterError as e:
            raise ConfigError(f"method.distill: {e}") from None
        if self.tasks.num_tasks < 1:
            raise ConfigError("tasks.num_tasks must be >= 1")
        if not self.dataset.train_manifest:
            raise ConfigError("dataset.train_manifest is required")
        return self


def config_digest(doc) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def from_dict(doc: dict | None, env=None) -> RunConfig:
    """Build a validated RunConfig: preset defaults, then ``doc``, then env overrides."""
    doc = copy.deepcopy(doc or {})
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for name, section in doc.items():
        if section is None:
            doc[name] = {}
        elif not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in dataclasses.fields(SECTIONS[name])}
        bad = set(doc[name]) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")

    preset = doc.get("trainer", {}).get("preset", TrainerSection.preset)
    if preset not in PRESET_VALUES:
        raise ConfigError(f"trainer.preset must be one of {TRAINER_PRESETS}")
    merged = _deep_update(copy.deepcopy(PRESET_VALUES[preset]), doc)
    merged.setdefault("trainer", {})["preset"] = preset
    if "distill" in merged.get("method", {}):
        merged["method"]["distill"] = {**MethodSection().distill, **merged["method"]["distill"]}

    _apply_env(merged, os.environ if env is None else env)
    cfg = RunConfig(**{name: SECTIONS[name](**merged.get(name, {})) for name in SECTIONS})
    resolve_baseline(cfg)
    return cfg.validate()


def _apply_env(doc, env):
    data_dir = env.get("LTCL_DATA_DIR")
    if data_dir:
        ds = doc.setdefault("dataset", {})
        for key in ("train_manifest", "test_manifest", "tasks_file"):
            if ds.get(key) and not Path(ds[key]).is_absolute():
                ds[key] = str(Path(data_dir) / ds[key])
        if not ds.get("root"):
            ds["root"] = data_dir
    if env.get("LTCL_OUT_DIR"):
        doc.setdefault("output", {})["out_dir"] = env["LTCL_OUT_DIR"]
    if env.get("LTCL_SEED"):
        try:
            doc.setdefault("trainer", {})["seed"] = int(env["LTCL_SEED"])
        except ValueError:
            raise ConfigError(f"LTCL_SEED must be an integer, got {env['LTCL_SEED']!r}") from None


def resolve_baseline(cfg: RunConfig) -> RunConfig:
    """Baselines switch every method component off."""
    m = cfg.method
    if m.baseline != "none":
        m.use_fkd = m.use_cam_cutmix = m.use_balanced_softmax = False
    if m.baseline == "logit_kd":
        m.distill = {**m.distill, "mode": "logit"}
    return cfg


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    doc = doc or {}
    # manifest paths are relative to the config file unless LTCL_DATA_DIR says otherwise
    env = os.environ if env is None else env
    if not env.get("LTCL_DATA_DIR"):
        ds = doc.get("dataset") or {}
        for key in ("train_manifest", "test_manifest", "tasks_file", "root"):
            if ds.get(key) and not Path(ds[key]).is_absolute():
                ds[key] = str(path.parent / ds[key])
    return from_dict(doc, env)


def save_config(path, cfg: RunConfig):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
