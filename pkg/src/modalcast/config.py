"""Flat key=value run configuration with include-file support.

Lines are `key = value` (dots namespace the keys), `# comments`, or
`include <path>` (resolved relative to the including file; later keys
win). A resolved copy is written next to every run's outputs so the run
can be reproduced from it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_MAX_INCLUDE_DEPTH = 16


def parse_config_text(text: str, base_dir: Path | None = None, depth: int = 0,
                      source: str = "<string>") -> dict:
    if depth > _MAX_INCLUDE_DEPTH:
        raise ConfigError(f"{source}: include depth exceeds {_MAX_INCLUDE_DEPTH}")
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include\t"):
            target = line.split(None, 1)[1].strip()
            inc = (base_dir / target) if base_dir is not None else Path(target)
            values.update(parse_config_file(inc, depth=depth + 1))
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = val
    return values


def parse_config_file(path, depth: int = 0) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base_dir=path.parent,
                             depth=depth, source=str(path))


def _to_bool(val: str) -> bool:
    low = val.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {val!r}")


@dataclass
class RunConfig:
    """Everything one command needs; serializes back to the flat format."""
    seed: int = 0
    out_dir: str = "runs/run"
    threads: int = 1
    device: str = "cpu"

    dataset_kind: str = "csv"          # csv | m4
    dataset_path: str = ""             # csv file, or M4 directory
    dataset_frequency: str = "monthly"  # m4 only
    dataset_split: str = "ratio:0.7:0.1:0.2"
    train_fraction: float = 1.0

    input_len: int = 96
    horizons: tuple = (96, 192, 336, 720)

    backbone_path: str = ""
    backbone_layers: int = 6
    backbone_width: int = 768
    backbone_heads: int = 12
    backbone_max_positions: int = 1024
    backbone_vocab: int = 50257
    backbone_causal: bool = True

    principal_path: str = ""

    match_heads: int = 0
    cross_heads: int = 1
    cross_scale: str = "tokens"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple = ("q", "v")

    gamma: float = 0.8
    lambda1: float = 1.0
    lambda2: float = 0.01
    sup_kind: str = "auto"
    feature_kind: str = "auto"
    output_kind: str = "auto"
    enable_feature: bool = True
    enable_output: bool = True
    stop_gradient_textual: bool = False

    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-4
    patience: int = 3

    KEY_MAP = {
        "seed": ("seed", int),
        "out_dir": ("out_dir", str),
        "threads": ("threads", int),
        "device": ("device", str),
        "dataset.kind": ("dataset_kind", str),
        "dataset.path": ("dataset_path", str),
        "dataset.frequency": ("dataset_frequency", str),
        "dataset.split": ("dataset_split", str),
        "dataset.train_fraction": ("train_fraction", float),
        "window.input_len": ("input_len", int),
        "window.horizons": ("horizons", "int_tuple"),
        "backbone.path": ("backbone_path", str),
        "backbone.layers": ("backbone_layers", int),
        "backbone.width": ("backbone_width", int),
        "backbone.heads": ("backbone_heads", int),
        "backbone.max_positions": ("backbone_max_positions", int),
        "backbone.vocab": ("backbone_vocab", int),
        "backbone.causal": ("backbone_causal", bool),
        "principal.path": ("principal_path", str),
        "model.match_heads": ("match_heads", int),
        "model.cross_heads": ("cross_heads", int),
        "model.cross_scale": ("cross_scale", str),
        "model.lora_rank": ("lora_rank", int),
        "model.lora_alpha": ("lora_alpha", float),
        "model.lora_targets": ("lora_targets", "str_tuple"),
        "loss.gamma": ("gamma", float),
        "loss.lambda1": ("lambda1", float),
        "loss.lambda2": ("lambda2", float),
        "loss.sup": ("sup_kind", str),
        "loss.feature": ("feature_kind", str),
        "loss.output": ("output_kind", str),
        "loss.enable_feature": ("enable_feature", bool),
        "loss.enable_output": ("enable_output", bool),
        "loss.stop_gradient_textual": ("stop_gradient_textual", bool),
        "train.epochs": ("epochs", int),
        "train.batch_size": ("batch_size", int),
        "train.lr": ("lr", float),
        "train.patience": ("patience", int),
    }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        cfg = cls()
        for key, raw in mapping.items():
            if key not in cls.KEY_MAP:
                raise ConfigError(f"unknown config key {key!r}")
            attr, conv = cls.KEY_MAP[key]
            try:
                if conv is bool:
                    value = _to_bool(raw)
                elif conv == "int_tuple":
                    value = tuple(int(p) for p in str(raw).split(",") if p.strip())
                elif conv == "str_tuple":
                    value = tuple(p.strip() for p in str(raw).split(",") if p.strip())
                else:
                    value = conv(raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"config key {key}: bad value {raw!r} ({e})") from None
            setattr(cfg, attr, value)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_config_file(path))

    def validate(self):
        if self.dataset_kind not in ("csv", "m4"):
            raise ConfigError(f"dataset.kind must be csv or m4, got {self.dataset_kind!r}")
        if self.device != "cpu":
            raise ConfigError(f"only device=cpu is supported, got {self.device!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"dataset.train_fraction must be in (0, 1], "
                              f"got {self.train_fraction}")
        if not self.horizons:
            raise ConfigError("window.horizons must name at least one horizon")

    def to_text(self) -> str:
        """Serialize so that from_file(to_text) reproduces this config."""
        attr_to_key = {attr: key for key, (attr, _) in self.KEY_MAP.items()}
        lines = []
        for f in fields(self):
            if f.name not in attr_to_key:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{attr_to_key[f.name]} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")
