"""Pipeline configuration: nested dataclasses read from ``key = value`` text.

Keys are dotted paths (``register.stage1.lr = 0.03``); a ``[register.stage1]``
line prefixes the keys that follow it. Unknown keys are rejected. An empty
file gives the published defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .mesh import DEFAULT_SMOOTHING, REGIONS
from .optim import LossWeights
from .registration import StageConfig


class ConfigError(ValueError):
    pass


@dataclass
class StageSettings:
    lr: float
    chamfer: float
    edge: float
    laplacian: float
    prune_threshold: float = 1.0
    steps: int = 1000
    squared: bool = True
    free_regions: tuple = ("scalp",)
    recompute_normals: bool = False

    def to_stage_config(self, mode) -> StageConfig:
        w = LossWeights(self.chamfer, self.edge, self.laplacian, self.prune_threshold, self.squared)
        return StageConfig(w, self.lr, self.steps, tuple(self.free_regions), mode, self.recompute_normals)


def _stage1(**kw):
    return StageSettings(lr=3e-2, chamfer=2e3, edge=2e5, laplacian=1e4, **kw)


def _stage2(**kw):
    kw.setdefault("free_regions", ("scalp", "face_skin", "lips"))
    return StageSettings(lr=3e-4, chamfer=2e4, edge=2e4, laplacian=1e4, **kw)


@dataclass
class RegisterSettings:
    stage1: StageSettings = field(default_factory=_stage1)
    stage2: StageSettings = field(default_factory=_stage2)


@dataclass
class PartialSettings:
    stage1: StageSettings = field(default_factory=lambda: StageSettings(
        lr=3e-2, chamfer=2e3, edge=8e5, laplacian=1e5, prune_threshold=10.0))
    stage2: StageSettings = field(default_factory=lambda: _stage2(prune_threshold=0.1))
    proximity: float = 0.1
    proximity_sparse: float = 0.3
    expansion: float = 1.5
    floor_quantile: float = 0.3
    vertical_axis: int = 1


@dataclass
class UvSettings:
    resolution: int = 256
    blend_radius: float = 10.0


@dataclass
class ModelSettings:
    components: int = 64
    psi: float = 0.7
    reg: float = 1e-3
    face_weight: float = 10.0 / 256.0
    l1_weight: float = 3.0
    iterative: bool = False
    steps: int = 300
    lr: float = 1e-2


@dataclass
class SmoothingSettings:
    lips: int = DEFAULT_SMOOTHING["lips"]
    face_skin: int = DEFAULT_SMOOTHING["face_skin"]
    scalp: int = DEFAULT_SMOOTHING["scalp"]
    neck: int = DEFAULT_SMOOTHING["neck"]
    ears: int = DEFAULT_SMOOTHING["ears"]
    eyeballs: int = DEFAULT_SMOOTHING["eyeballs"]
    inner_mouth: int = DEFAULT_SMOOTHING["inner_mouth"]

    def as_dict(self):
        return {r: getattr(self, r) for r in REGIONS}


@dataclass
class AnimateSettings:
    subdivision: int = 3
    smoothing: SmoothingSettings = field(default_factory=SmoothingSettings)


@dataclass
class MetricSettings:
    points: int = 10000
    grid: int = 64


@dataclass
class PipelineConfig:
    register: RegisterSettings = field(default_factory=RegisterSettings)
    partial: PartialSettings = field(default_factory=PartialSettings)
    uv: UvSettings = field(default_factory=UvSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    animate: AnimateSettings = field(default_factory=AnimateSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    seed: int = 0
    workers: int = 1


def _parse_value(raw, current, key):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def set_key(cfg, key, raw):
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    value = _parse_value(raw, current, key)
    if key.endswith("free_regions"):
        bad = [r for r in value if r not in REGIONS]
        if bad:
            raise ConfigError(f"{key}: unknown regions {bad}")
    setattr(obj, leaf, value)


def parse_config(text, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base if base is not None else PipelineConfig()
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        try:
            set_key(cfg, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        else:
            yield key, value


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, value in _flatten(cfg):
        if isinstance(value, tuple):
            value = ", ".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
