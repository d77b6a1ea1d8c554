"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Sections are ``model``, ``train``, ``data`` and ``eval``. ``#`` starts a
comment. Unknown sections or keys and malformed values are reported with the
offending line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, preset


class ConfigError(ValueError):
    def __init__(self, msg: str, path: str | None = None, line: int | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + msg)
        self.line = line


@dataclass
class TrainConfig:
    crop_size: int = 64
    learning_rate: float = 1e-4
    layer_decay: float = 0.9
    head_scale: float = 10.0
    batch_size: int = 8
    total_iters: int = 600
    warmup_iters: int = 30
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    grad_clip: float = 0.01
    literal_llrd: bool = False
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.optimizer != "adamw":
            raise ValueError(f"optimizer must be 'adamw', got {self.optimizer!r}")
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters exceeds total_iters")


@dataclass
class DataConfig:
    root: str = "data"
    image_size: int = 64
    num_classes: int = 4
    train_images: int = 200
    val_images: int = 50
    shapes_min: int = 1
    shapes_max: int = 5
    noise: float = 8.0
    seed: int = 0


@dataclass
class EvalConfig:
    crop: int = 64
    stride: int = 48
    batch_size: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _coerce(raw: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_config(text: str, path: str | None = None) -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    lines: dict[tuple, int] = {}
    section = None
    model_preset = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"malformed section header {s!r}", path, no)
            section = s[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {list(_SECTIONS)}", path, no)
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", path, no)
        if section is None:
            raise ConfigError("key outside of any section", path, no)
        key, raw = (p.strip() for p in s.split("=", 1))
        if section == "model" and key == "preset":
            model_preset = (raw, no)
            continue
        types = {f.name: f.type for f in fields(_SECTIONS[section])}
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section}]", path, no)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", path, no)
        try:
            values[section][key] = _coerce(raw, types[key])
        except ValueError as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}", path, no) from None
        lines[(section, key)] = no

    def build(name):
        try:
            if name == "model" and model_preset is not None:
                try:
                    return preset(model_preset[0], **values[name])
                except KeyError as e:
                    raise ConfigError(str(e.args[0]), path, model_preset[1]) from None
            return _SECTIONS[name](**values[name])
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            first = min((lines[(name, k)] for k in values[name]), default=None)
            raise ConfigError(f"invalid [{name}] section: {e}", path, first) from None

    return RunConfig(**{name: build(name) for name in _SECTIONS})


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(p)) from None
    return parse_config(text, str(p))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(cfg: RunConfig) -> str:
    """Every field written explicitly, so parsing the output gives back ``cfg``."""
    out = []
    for name in _SECTIONS:
        out.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            out.append(f"{k} = {_fmt(v)}")
        out.append("")
    return "\n".join(out)
