"""Architecture configs, named presets and YAML config files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

HEADS = ("V1", "V1h", "V2", "V2p", "ClsDefault", "ClsCi", "ClsCii")
CLS_HEADS = ("ClsDefault", "ClsCi", "ClsCii")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    width_c: int = 32
    stage_blocks: tuple[int, ...] = (1, 1, 4, 3)
    branch_units: int = 4
    head: str = "V1"
    fusion_design: str = "c"
    combine: str = "sum"
    downsample_kind: str = "strided-conv"
    upsample_order: str = "conv-first"
    maintain_from_start: bool = False
    light_transition: bool = False
    pyramid_levels: int = 5
    pyramid_width: int = 256
    num_outputs: int = 17

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        self.validate()

    def validate(self) -> None:
        if self.width_c < 1:
            raise ConfigError(f"width_c must be >= 1, got {self.width_c}")
        if len(self.stage_blocks) != 4:
            raise ConfigError(f"stage_blocks needs 4 entries (one per stage), got {len(self.stage_blocks)}")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("every stage needs at least one block")
        if self.branch_units < 1:
            raise ConfigError("branch_units must be >= 1")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.fusion_design not in ("a", "b", "c"):
            raise ConfigError(f"fusion_design must be a, b or c, got {self.fusion_design!r}")
        if self.combine not in ("sum", "multiply"):
            raise ConfigError(f"combine must be sum or multiply, got {self.combine!r}")
        if self.downsample_kind not in ("strided-conv", "bilinear"):
            raise ConfigError(f"bad downsample_kind {self.downsample_kind!r}")
        if self.upsample_order not in ("conv-first", "resize-first"):
            raise ConfigError(f"bad upsample_order {self.upsample_order!r}")
        if self.head == "V2p" and self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if self.pyramid_width < 1:
            raise ConfigError("pyramid_width must be >= 1")
        if self.head in CLS_HEADS and self.num_outputs < 1:
            raise ConfigError(f"{self.head} needs num_outputs >= 1 classes")
        if self.num_outputs < 0:
            raise ConfigError("num_outputs must be >= 0")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.width_c * 2 ** r for r in range(4))

    def replace(self, **changes) -> "ArchConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


FIELDS = {f.name for f in dataclasses.fields(ArchConfig)}

PRESET_WIDTHS = {f"w{w}": w for w in (18, 30, 32, 40, 44, 48, 64, 76, 96)}


def preset(name: str, **overrides) -> ArchConfig:
    key = name.lower()
    if key not in PRESET_WIDTHS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_WIDTHS)}")
    return ArchConfig(width_c=PRESET_WIDTHS[key], **overrides)


def from_dict(d: dict) -> ArchConfig:
    unknown = set(d) - FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ArchConfig(**d)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def load_config(path: str | Path) -> ArchConfig:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return from_dict(data)


def dump_config(cfg: ArchConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
