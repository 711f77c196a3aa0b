"""Run configuration files.

Format: UTF-8, ``key = value`` per line, ``#`` comments, and section headers
``[model]``, ``[train]``, ``[data]``, ``[eval]``. Absent keys keep their
defaults (the desk-scale setup).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ConfigError, HiTConfig
from .train import TrainConfig

log = logging.getLogger(__name__)


class ConfigFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path or '<config>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic-quadrant"
    n_train_per_class: int = 250
    n_eval_per_class: int = 100
    seed: int = 1000
    path: str = ""
    eval_path: str = ""
    radius: float = 7.0
    noise: float = 0.35

    def __post_init__(self):
        if self.source not in ("synthetic-quadrant", "image-dir"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "image-dir" and not self.path:
            raise ValueError("data source image-dir needs a path")


@dataclass(frozen=True)
class EvalConfig:
    n_images: int = 100
    corruption: str = "zero"
    blur_sigma: float = 5.0
    blur_kernel: int = 11
    gradcam_layer: int = -1
    sanity_seed: int = 0

    def __post_init__(self):
        if self.corruption not in ("zero", "blur"):
            raise ValueError(f"unknown corruption {self.corruption!r}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd and positive")
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: HiTConfig = field(default_factory=HiTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = {"model": HiTConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _convert(type_name: str, raw: str):
    raw = raw.strip()
    if type_name == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name.startswith("tuple"):
        raw = raw.strip("[]()")
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_config_text(text: str, path=None, explicit: set | None = None) -> RunConfig:
    """Parse config text. ``explicit`` (if given) collects the ``(section, key)`` pairs set in it."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    lines: dict[tuple[str, str], int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigFileError(f"malformed section header {stripped!r}", lineno, path)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigFileError(f"unknown section [{section}]", lineno, path)
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigFileError(f"expected 'key = value', got {stripped!r}", lineno, path)
        if section is None:
            raise ConfigFileError(f"key {key!r} outside any section", lineno, path)
        types = {f.name: f.type for f in fields(SECTIONS[section])}
        if key not in types:
            raise ConfigFileError(f"unknown key {key!r} in [{section}]", lineno, path)
        try:
            values[section][key] = _convert(types[key], raw)
        except ValueError as exc:
            raise ConfigFileError(f"{key}: {exc}", lineno, path) from None
        lines[(section, key)] = lineno
        if explicit is not None:
            explicit.add((section, key))
    built = {}
    for name, cls in SECTIONS.items():
        try:
            built[name] = cls(**values[name])
        except (ValueError, ConfigError) as exc:
            line = min((n for (s, _), n in lines.items() if s == name), default=None)
            raise ConfigFileError(f"[{name}] {exc}", line, path) from None
    cfg = RunConfig(**built)
    if cfg.model.num_classes < 1:
        raise ConfigFileError("num_classes must be positive", None, path)
    return cfg


def parse_config(path, explicit: set | None = None) -> RunConfig:
    """Read a config file; every resolved value is logged at INFO level."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read: {exc.strerror}", None, path) from None
    cfg = parse_config_text(text, path, explicit)
    for line in dump_config(cfg).splitlines():
        if line and not line.startswith("["):
            log.info("config %s", line)
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    out = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(section):
            out.append(f"{f.name} = {_fmt(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    return replace(cfg, **{k: replace(getattr(cfg, k), **v) for k, v in sections.items()})
