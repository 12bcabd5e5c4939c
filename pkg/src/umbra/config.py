"""Run configuration: INI-style file with sections, strict key checking,
CLI-flag overrides, and an effective-config echo per run directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .backbone import BackboneConfig
from .detector import FCDConfig, canonical_mode
from .errors import ConfigError
from .losses import LossWeights
from .restoration import CFLConfig, UNetConfig
from .samples import PRED_THRESHOLD
from .synth import GenConfig
from .training import ArchConfig, TrainConfig


@dataclass
class EvalConfig:
    threshold: float = PRED_THRESHOLD
    residual_threshold: float = 0.05

    def validate(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"eval threshold must be in (0,1), got {self.threshold}")


@dataclass
class RunConfig:
    side: int = 160
    mode: str = "bb_ccd_fcd"
    gen: GenConfig = field(default_factory=GenConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fcd: FCDConfig = field(default_factory=FCDConfig)
    ccd_width: int = 64
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(width_factor=0.5))
    cfl: CFLConfig = field(default_factory=CFLConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.side % 32 != 0 or self.side < 32:
            raise ConfigError(f"side must be a positive multiple of 32, got {self.side}")
        self.mode = canonical_mode(self.mode)
        self.gen.side = self.side
        self.gen.validate()
        self.backbone.validate()
        self.fcd.validate()
        self.unet.validate()
        self.cfl.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()

    def arch(self) -> ArchConfig:
        return ArchConfig(side=self.side, mode=self.mode, backbone=self.backbone,
                          fcd=self.fcd, ccd_width=self.ccd_width, unet=self.unet,
                          cfl=self.cfl)


# section -> (target attribute on RunConfig, dataclass type)
_SECTIONS = {
    "run": (None, None),
    "gen": ("gen", GenConfig),
    "backbone": ("backbone", BackboneConfig),
    "fcd": ("fcd", FCDConfig),
    "unet": ("unet", UNetConfig),
    "cfl": ("cfl", CFLConfig),
    "loss": ("loss", LossWeights),
    "train": ("train", TrainConfig),
    "eval": ("eval", EvalConfig),
}
_RUN_KEYS = {"side": int, "mode": str, "ccd_width": int}


def _parse_value(raw: str, kind: Any, path: str) -> Any:
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is str:
            return raw
        # tuples: comma-separated, element type from the default value
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from exc


def _assign_key(obj: Any, key: str, raw: str, path: str) -> None:
    matching = {f.name: f for f in fields(obj)}
    if key not in matching:
        raise ConfigError(f"unknown key {path}")
    current = getattr(obj, key)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = type(current[0]) if current else float
        value = tuple(_parse_value(p, elem, path) for p in parts)
    elif current is None:
        value = _parse_value(raw, int, path) if raw.lower() != "none" else None
    else:
        value = _parse_value(raw, type(current), path)
    setattr(obj, key, value)


def load_config(path: Optional[Path | str] = None) -> RunConfig:
    """Parse an INI config into a defaulted RunConfig; unknown sections or
    keys are errors. A missing/None path yields all defaults."""
    cfg = RunConfig()
    if path is None:
        cfg.validate()
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if section == "run":
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key run.{key}")
                setattr(cfg, key, _parse_value(raw, _RUN_KEYS[key], f"run.{key}"))
            else:
                attr, _ = _SECTIONS[section]
                _assign_key(getattr(cfg, attr), key, raw, f"{section}.{key}")
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-path overrides like {'train.lr': 0.01, 'side': 192}."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            target = getattr(cfg, section)
            if not any(f.name == key for f in fields(target)):
                raise ConfigError(f"unknown override {dotted}")
            setattr(target, key, value)
        else:
            if not any(f.name == dotted for f in fields(cfg)):
                raise ConfigError(f"unknown override {dotted}")
            setattr(cfg, dotted, value)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render the effective configuration as INI text."""
    parser = configparser.ConfigParser()
    parser["run"] = {k: _fmt(getattr(cfg, k)) for k in _RUN_KEYS}
    for section, (attr, _) in _SECTIONS.items():
        if attr is None:
            continue
        obj = getattr(cfg, attr)
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
    import io
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_effective_config(cfg: RunConfig, run_dir: Path | str) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "effective_config.ini"
    out.write_text(dump_config(cfg))
    return out


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)
