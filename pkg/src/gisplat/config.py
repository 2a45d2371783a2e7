"""Run configuration and its plain-text ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidArgument
from .gmap.mapping import MappingConfig, SeedConfig
from .keyframing import KfConfig
from .tracking import TrackingConfig

MODES = ("mono", "rgbd")
IMU_MODES = ("off", "accel_only", "full")
SECTIONS = ("tracking", "kf", "mapping", "seeding")


@dataclass
class SlamConfig:
    mode: str = "rgbd"
    imu_mode: str = "full"
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    kf: KfConfig = field(default_factory=KfConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    seeding: SeedConfig = field(default_factory=SeedConfig)
    mono_tracking_iters: int = 100
    gravity: tuple | None = (0.0, 0.0, -9.81)
    single_sample_imu: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    eval_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.imu_mode not in IMU_MODES:
            raise InvalidArgument(f"imu_mode must be one of {IMU_MODES}, got {self.imu_mode!r}")
        if self.eval_every < 1:
            raise InvalidArgument("eval_every must be >= 1")

    def effective_tracking(self) -> TrackingConfig:
        """Tracking settings adjusted for the sensor mode."""
        if self.mode == "mono":
            return dataclasses.replace(self.tracking, iters=self.mono_tracking_iters, lambda_depth=0.0,
                                       masked_rgb=True)
        return self.tracking


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, default, key: str):
    s = text.strip()
    try:
        if s.lower() == "none":
            return None
        if isinstance(default, bool):
            if s.lower() in ("true", "1", "yes", "on"):
                return True
            if s.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, (tuple, list)) or default is None:
            return tuple(float(x) for x in s.split(","))
        return s
    except ValueError:
        raise InvalidArgument(f"bad value for {key}: {text!r}") from None


def config_items(cfg: SlamConfig) -> list[tuple[str, object]]:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            out += [(f"{f.name}.{g.name}", getattr(v, g.name)) for g in dataclasses.fields(v)]
        else:
            out.append((f.name, v))
    return out


def dump_config(cfg: SlamConfig | None = None) -> str:
    cfg = cfg or SlamConfig()
    lines = ["# gisplat configuration: one 'key = value' per line"]
    lines += [f"{k} = {_fmt(v)}" for k, v in config_items(cfg)]
    return "\n".join(lines) + "\n"


def config_dict(cfg: SlamConfig) -> dict:
    return {k: (v if not (isinstance(v, float) and math.isinf(v)) else _fmt(v)) for k, v in config_items(cfg)}


def parse_config(text: str, base: SlamConfig | None = None, source: str = "<config>") -> SlamConfig:
    cfg = base or SlamConfig()
    top, sections = {}, {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise InvalidArgument(f"{source}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in s.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS or name not in {f.name for f in dataclasses.fields(getattr(cfg, sec))}:
                raise InvalidArgument(f"{source}:{lineno}: unknown key {key!r}")
            sections[sec][name] = _parse(value, getattr(getattr(cfg, sec), name), key)
        else:
            if key in SECTIONS or key not in {f.name for f in dataclasses.fields(cfg)}:
                raise InvalidArgument(f"{source}:{lineno}: unknown key {key!r}")
            top[key] = _parse(value, getattr(cfg, key), key)
    for sec, kv in sections.items():
        if kv:
            top[sec] = dataclasses.replace(getattr(cfg, sec), **kv)
    return dataclasses.replace(cfg, **top)


def load_config(path, base: SlamConfig | None = None) -> SlamConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base, str(path))
