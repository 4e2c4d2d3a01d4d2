"""Pipeline configuration: dataclass sections loaded from TOML.

Sections are ``[octree]``, ``[descriptors]``, ``[msgv]``, ``[reg]`` and
``[bench]``. A top-level ``preset`` key picks per-dataset defaults for the
length-consistency sensitivity and the inlier radius; explicit keys win.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .descriptors import BLOCKS, DescriptorConfig
from .errors import ConfigError
from .msgv import SIGMA_D, MSGVConfig
from .registration import TAU_A, RegistrationConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

PRESETS = tuple(SIGMA_D)


@dataclass
class OctreeConfig:
    voxel: float = 0.4
    depth: int = 6
    levels: int = 3

    def validate(self) -> "OctreeConfig":
        if not self.voxel > 0:
            raise ValueError("voxel must be positive")
        if self.levels < 2 or self.depth < self.levels - 1:
            raise ValueError("need levels >= 2 and depth >= levels - 1")
        return self


@dataclass
class BenchConfig:
    seed: int = 107
    queries: int = 200
    map_size: float = 100.0        # side of the square synthetic map, metres
    db_spacing: float = 12.5       # grid spacing of database scans, metres
    noise_sigmas: tuple[float, ...] = (0.0, 0.05, 0.1)
    max_occlusion: float = 45.0    # degrees
    max_shift: float = 5.0         # metres, query offset from its nearest grid node
    top_k: int = 20
    recall_r: float = 10.0         # metres
    recall_ks: tuple[int, ...] = (1, 5)

    def validate(self) -> "BenchConfig":
        if self.queries < 1 or self.top_k < 1 or not self.recall_ks or min(self.recall_ks) < 1:
            raise ValueError("queries, top_k and recall ks must be >= 1")
        if not (self.map_size > 0 and self.db_spacing > 0 and self.recall_r >= 0):
            raise ValueError("map size and spacing must be positive, recall radius non-negative")
        if any(s < 0 for s in self.noise_sigmas) or not self.noise_sigmas:
            raise ValueError("noise sigmas must be a non-empty list of non-negative values")
        if not 0 <= self.max_occlusion < 360 or self.max_shift < 0:
            raise ValueError("occlusion must lie in [0, 360) and shift must be non-negative")
        return self


@dataclass
class PipelineConfig:
    octree: OctreeConfig = field(default_factory=OctreeConfig)
    descriptors: DescriptorConfig = field(default_factory=DescriptorConfig)
    msgv: MSGVConfig = field(default_factory=MSGVConfig)
    reg: RegistrationConfig = field(default_factory=RegistrationConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "PipelineConfig":
        try:
            self.octree.validate()
            self.descriptors.validate(self.octree.levels)
            self.reg.validate()
            self.bench.validate()
            if len(self.msgv.lambdas) != self.octree.levels:
                raise ValueError("msgv.lambdas needs one entry per octree level")
            if self.msgv.sigma_d <= 0:
                raise ValueError("msgv.sigma_d must be positive")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}


SECTIONS = {
    "octree": OctreeConfig,
    "descriptors": DescriptorConfig,
    "msgv": MSGVConfig,
    "reg": RegistrationConfig,
    "bench": BenchConfig,
}


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(cls, values: dict, name: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if name == "descriptors" and "block_weights" in kwargs:
        weights = dict(DescriptorConfig().block_weights)
        extra = sorted(set(kwargs["block_weights"]) - set(BLOCKS))
        if extra:
            raise ConfigError(f"unknown descriptor block(s): {', '.join(extra)}")
        weights.update(kwargs["block_weights"])
        kwargs["block_weights"] = weights
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    preset = data.pop("preset", None)
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for name, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
    msgv = dict(data.get("msgv", {}))
    reg = dict(data.get("reg", {}))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        msgv.setdefault("sigma_d", SIGMA_D[preset])
        reg.setdefault("tau_a", TAU_A[preset])
    sections = {**data, "msgv": msgv, "reg": reg}
    cfg = PipelineConfig(**{name: _section(cls, sections.get(name, {}), name)
                            for name, cls in SECTIONS.items()})
    return cfg.validate()


def load_config(path=None) -> PipelineConfig:
    """Defaults when ``path`` is None, else the TOML file merged over them."""
    if path is None:
        return PipelineConfig().validate()
    try:
        data = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return config_from_dict(data)
