"""Run configuration: INI-style sections mapped onto the component dataclasses.

Every key must be a known field of its section; unknown sections or keys
are configuration errors. ``write_config`` emits every field, so a run
directory always records the fully resolved configuration.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from safer.attacks import AttackConfig
from safer.data import AugmentConfig, Dataset, load_cifar10_binary, synth_dataset, train_val_split
from safer.errors import ConfigError
from safer.models import AdapterConfig, ViTConfig, build_model, wrap_adapters
from safer.models.vit import Model
from safer.sharpness import SharpnessConfig
from safer.trainer import LoopConfig, OptimizerConfig, SaferSchedule, SweepBase


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "cifar10-binary"
    path: str = ""
    n: int = 2048
    test_n: int = 512
    classes: int = 10
    noise: float = 0.25
    jitter: float = 2.0
    color_jitter: float = 0.1
    label_noise: float = 0.0
    seed: int = 0
    test_seed: int = 1

    def validate(self) -> None:
        if self.source not in ("synthetic", "cifar10-binary"):
            raise ConfigError(f"data.source must be 'synthetic' or 'cifar10-binary', got {self.source!r}")
        if self.source == "cifar10-binary" and not self.path:
            raise ConfigError("data.path is required for cifar10-binary")
        if self.n < 1 or self.test_n < 1:
            raise ConfigError("data.n and data.test_n must be positive")


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    pad: int = 4
    crop: int | None = None
    hflip_prob: float = 0.5

    def build(self, seed: int) -> AugmentConfig | None:
        return AugmentConfig(self.pad, self.crop, self.hflip_prob, seed) if self.enabled else None

    def validate(self) -> None:
        AugmentConfig(self.pad, self.crop, self.hflip_prob).validate()


@dataclass(frozen=True)
class AdapterSection:
    kind: str = "none"  # none, lora or dora
    rank: int = 4
    alpha: float = 8.0

    def validate(self) -> None:
        if self.kind not in ("none", "lora", "dora"):
            raise ConfigError(f"adapter.kind must be none, lora or dora, got {self.kind!r}")
        if self.kind != "none":
            AdapterConfig(self.kind, self.rank, self.alpha).validate()


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    batch_size: int = 64
    val_fraction: float = 0.1
    eval_robust_every: int = 1
    eval_size: int | None = None
    checkpoint_every: int = 0

    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ViTConfig = field(default_factory=ViTConfig)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_attack: AttackConfig = field(default_factory=AttackConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: SaferSchedule = field(default_factory=SaferSchedule)
    sharpness: SharpnessConfig = field(default_factory=SharpnessConfig)

    def validate(self) -> None:
        for f in fields(self):
            getattr(self, f.name).validate()
        self.loop().validate()
        if self.data.source == "cifar10-binary" and (self.model.image_size, self.model.channels) != (32, 3):
            raise ConfigError("cifar10-binary data needs model.image_size = 32 and model.channels = 3")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=seed), model=replace(self.model, seed=seed))

    def with_output_dir(self, path) -> "RunConfig":
        return replace(self, run=replace(self.run, output_dir=str(path)))

    # -- builders ---------------------------------------------------------
    def loop(self) -> LoopConfig:
        r = self.run
        return LoopConfig(r.batch_size, r.val_fraction, r.eval_robust_every, r.eval_size, self.eval_attack,
                          r.checkpoint_every, r.seed)

    def build_model(self) -> Model:
        model = build_model(self.model)
        if self.adapter.kind != "none":
            model = wrap_adapters(model, AdapterConfig(self.adapter.kind, self.adapter.rank, self.adapter.alpha,
                                                       seed=self.model.seed))
        return model

    def datasets(self) -> tuple[Dataset, Dataset]:
        """``(train, test)``. Validation is carved out of ``train`` by the trainer."""
        d = self.data
        if d.source == "cifar10-binary":
            return load_cifar10_binary(d.path, "train"), load_cifar10_binary(d.path, "test")
        kw = dict(classes=d.classes, image_size=self.model.image_size, channels=self.model.channels,
                  noise=d.noise, jitter=d.jitter, color_jitter=d.color_jitter)
        train = synth_dataset(d.n, seed=d.seed, label_noise=d.label_noise, **kw)
        test = synth_dataset(d.test_n, seed=d.test_seed, split="test", **kw)
        return train, test

    def sweep_base(self) -> SweepBase:
        train, test = self.datasets()
        return SweepBase(self.model, train, self.schedule, self.attack, self.optimizer, self.sharpness,
                         self.loop(), self.augment.build(self.run.seed), test)


# -- INI mapping -----------------------------------------------------------------

def _convert(text: str, type_str: str, where: str):
    t = type_str.replace(" ", "")
    optional = t.endswith("|None")
    if optional:
        t = t[:-5]
        if text.strip().lower() in ("", "none"):
            return None
    try:
        if t == "bool":
            low = text.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
        if t == "str":
            return text.strip()
        if t.startswith("tuple[str") or t.startswith("frozenset[str"):
            items = tuple(s.strip() for s in text.split(",") if s.strip())
            return frozenset(items) if t.startswith("frozenset") else items
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {type_str}") from None
    raise ConfigError(f"{where}: unsupported field type {type_str}")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, frozenset, set, list)):
        return ", ".join(sorted(value) if isinstance(value, (frozenset, set)) else value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive field names
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    sections = {f.name: f for f in fields(RunConfig)}
    values = {}
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(f"unknown config section [{sec}]; expected one of {sorted(sections)}")
        default = sections[sec].default_factory()
        known = {f.name: f for f in fields(default)}
        kw = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}; expected one of {sorted(known)}")
            kw[key] = _convert(raw, str(known[key].type), f"{sec}.{key}")
        values[sec] = replace(default, **kw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def write_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        cp[f.name] = {sf.name: _render(getattr(section, sf.name)) for sf in fields(section)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def split_for_eval(cfg: RunConfig, train: Dataset) -> Dataset:
    """The validation split the trainer would carve from ``train``."""
    if cfg.run.val_fraction <= 0:
        return train
    return train_val_split(train, cfg.run.val_fraction, cfg.run.seed)[1]
