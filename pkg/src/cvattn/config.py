"""Model, training and task configuration plus named presets.

Config files are INI-style with ``[model]``, ``[train]`` and ``[task]``
sections. Every key has a default; unknown sections or keys are errors.
Run manifests are JSON with the same three sections and load the same way.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

VARIANTS = ("catt", "aatt", "apatt", "riatt", "yang", "real")
KERNELS = ("dot", "qkt")
TASKS = ("classification", "sequence")
PRESETS = ("toy", "paper-full", "paper-split")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    dropout_p: float = 0.1
    variant: str = "catt"
    kernel: str = "dot"
    conv_embedding: bool = True
    norm_eps: float = 1e-5
    per_feature_norm: bool = False
    pe_imag: bool = False
    yang_real_projections: bool = True
    # copied from the task section when a run is resolved
    task: str = "classification"
    d_in: int = 64
    n_classes: int = 16
    seq_in: int = 64
    seq_out: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("model.dropout_p must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"model.kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.variant == "yang" and self.kernel == "dot":
            raise ConfigError("model.kernel: variant 'yang' is only defined with kernel 'qkt'")
        if self.variant == "real" and self.kernel != "dot":
            raise ConfigError("model.kernel: the real baseline only has the ordinary dot product (kernel 'dot')")
        for name in ("d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % 2:
            raise ConfigError("model.d_model must be even for the sinusoidal encoding")


@dataclass
class TrainConfig:
    batch_size: int = 35
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "f32"
    preset: str = "toy"

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("train.precision must be 'f32' or 'f64'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")


@dataclass
class TaskConfig:
    task: str = "classification"
    n_samples: int = 2000
    seq_len: int = 64
    frame_len: int = 64
    n_classes: int = 16
    max_active_notes: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seq_in: int = 12
    seq_out: int = 4
    activation_prior: float = 0.15
    persistence: float = 0.99
    detune: float = 0.25

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task.task must be one of {TASKS}, got {self.task!r}")
        if self.frame_len < 2 or self.frame_len & (self.frame_len - 1):
            raise ConfigError("task.frame_len must be a power of two")
        if self.n_classes + 1 > self.frame_len // 2:
            raise ConfigError("task.n_classes too large for task.frame_len (need n_classes + 1 <= frame_len / 2)")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("task.split_fractions must be three fractions summing to 1")
        if min(self.split_fractions) < 0:
            raise ConfigError("task.split_fractions must be non-negative")
        if not 1 <= self.max_active_notes <= self.n_classes:
            raise ConfigError("task.max_active_notes must lie in [1, n_classes]")
        if self.task == "sequence" and self.seq_in + self.seq_out != self.seq_len:
            raise ConfigError("task.seq_len must equal task.seq_in + task.seq_out")
        if self.task == "sequence" and (self.seq_in < 1 or self.seq_out < 1):
            raise ConfigError("task.seq_in and task.seq_out must be positive")
        if not 0 <= self.activation_prior <= 1 or not 0 <= self.persistence <= 1:
            raise ConfigError("task.activation_prior and task.persistence must be probabilities")
        if self.noise_sigma < 0:
            raise ConfigError("task.noise_sigma must be non-negative")

    def split_sizes(self) -> tuple[int, int, int]:
        n_train = int(round(self.n_samples * self.split_fractions[0]))
        n_val = int(round(self.n_samples * self.split_fractions[1]))
        return n_train, n_val, self.n_samples - n_train - n_val


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def resolve(self) -> RunConfig:
        """Copy task-owned dimensions into the model section and validate everything."""
        t = self.task
        t.validate()
        self.model.task = t.task
        self.model.d_in = t.frame_len
        self.model.n_classes = t.n_classes
        if t.task == "sequence":
            self.model.seq_in, self.model.seq_out = t.seq_in, t.seq_out
        else:
            self.model.seq_in, self.model.seq_out = t.seq_len, 0
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"]["split_fractions"] = list(self.task.split_fractions)
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base: RunConfig | None = None) -> RunConfig:
        cfg = base or cls()
        for section, values in d.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            for key, value in values.items():
                set_key(target, section, key, value)
        return cfg


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "task": TaskConfig}
# keys that the task section owns; setting them under [model] is an error
_DERIVED = {"task", "d_in", "n_classes", "seq_in", "seq_out"}


def _coerce(value, typ: str, name: str):
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "tuple":
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return tuple(float(v) for v in value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {value!r} as {typ}") from None


def set_key(target, section: str, key: str, value, allow_derived: bool = False) -> None:
    name = f"{section}.{key}"
    types = {f.name: f.type for f in fields(target)}
    if key not in types:
        raise ConfigError(f"unknown config key {name}")
    if section == "model" and key in _DERIVED and not allow_derived:
        if getattr(target, key) != _coerce(value, types[key], name):
            raise ConfigError(f"{name} is derived from the [task] section and cannot be set here")
        return
    setattr(target, key, _coerce(value, types[key], name))


def preset(name: str, task: str = "classification") -> RunConfig:
    """Named configurations: ``toy`` (desk scale), ``paper-full``, ``paper-split``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    cfg = RunConfig()
    cfg.train.preset = name
    cfg.task.task = task
    if task == "sequence":
        # 8000 windows of 16 frames give the same frames per epoch as 2000 classification samples of 64
        cfg.task.seq_len, cfg.task.seq_in, cfg.task.seq_out = 16, 12, 4
        cfg.task.n_samples = 8000
    if name == "paper-split":
        cfg.task.seq_len, cfg.task.seq_in, cfg.task.seq_out = 64, 43, 21
    if name == "paper-full":
        cfg.model = ModelConfig(d_model=320, n_heads=8, n_layers=6, d_ff=2048, dropout_p=0.1)
        cfg.train = TrainConfig(batch_size=35, epochs=100, lr=1e-4, precision="f32", preset=name)
        cfg.task.n_classes = 128
        cfg.task.frame_len = 512
        cfg.task.seq_len = 64
        cfg.task.n_samples = 41038
        cfg.task.split_fractions = (35111 / 41038, 2030 / 41038, 3897 / 41038)
        cfg.task.max_active_notes = 6
        if task == "sequence":
            cfg.task.seq_in, cfg.task.seq_out = 43, 21
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Read an INI config or a JSON run manifest on top of ``base``."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        data = data.get("config", data)
        cfg = base or RunConfig()
        for section, values in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            for key, value in values.items():
                set_key(target, section, key, value, allow_derived=True)
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    data = {s: dict(parser.items(s)) for s in parser.sections()}
    return RunConfig.from_dict(data, base)


def dump_ini(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if section == "model" and key in _DERIVED:
                continue
            if isinstance(value, list):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
