"""Configuration dataclasses and YAML loading.

All sections of the structured config map to one dataclass each.  A config
file may contain any subset of the sections; missing keys keep defaults.

    dataset:   DatasetConfig
    generator: GeneratorConfig
    geometry:  GeometryConfig
    physics:   PhysicsConfig
    social:    SocialConfig
    output:    OutputConfig
    model:     ModelConfig
    train:     TrainConfig
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

SEED_ENV_VAR = "GATSBI_SEED"


def _check_positive(obj, names):
    for name in names:
        value = getattr(obj, name)
        if value is None or value <= 0:
            raise ConfigurationError(f"{type(obj).__name__}.{name} must be positive, got {value!r}")


@dataclass
class DatasetConfig:
    t_obs: int = 100
    horizons: list[int] = field(default_factory=lambda: [25, 50, 75, 100])
    stride: int = 1
    N_max: int = 5
    neighbor_radius: float = 20.0
    k_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        _check_positive(self, ["t_obs", "stride", "N_max", "neighbor_radius", "k_folds"])
        if not self.horizons or any(h <= 0 for h in self.horizons):
            raise ConfigurationError(f"horizons must be positive, got {self.horizons!r}")
        self.horizons = [int(h) for h in self.horizons]


@dataclass
class GeneratorConfig:
    """Circular-track scene generator settings.

    ``behavior_mix`` gives relative weights for the three behaviours.
    Speeds are arc-length speeds along the track centre line.
    """

    radius: float = 25.0
    agents: int = 8
    fps: float = 25.0
    duration: float = 10.0
    warmup: float = 2.0
    behavior_mix: dict = field(
        default_factory=lambda: {"constant": 0.4, "accelerating": 0.3, "overtaker": 0.3}
    )
    speed_range: tuple[float, float] = (3.5, 6.0)
    accel_range: tuple[float, float] = (0.2, 0.6)
    speed_limits: tuple[float, float] = (2.0, 8.0)
    overtake_speedup: float = 1.2
    lane_width: float = 1.0
    pass_offset: float = 1.5
    lateral_speed: float = 0.8
    trigger_gap: float = 10.0
    clearance: float = 1.0
    follow_gap: float = 4.0
    sigma_obs: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.radius is None or self.radius <= 0:
            raise ConfigurationError(f"radius must be positive, got {self.radius!r}")
        if self.duration is None or self.duration <= 0:
            raise ConfigurationError(f"duration must be positive, got {self.duration!r}")
        _check_positive(self, ["agents", "fps", "clearance", "lane_width"])
        if self.sigma_obs < 0:
            raise ConfigurationError("sigma_obs must be >= 0")
        if self.warmup < 0:
            raise ConfigurationError("warmup must be >= 0")
        self.speed_range = tuple(self.speed_range)
        self.accel_range = tuple(self.accel_range)
        self.speed_limits = tuple(self.speed_limits)
        self.center = tuple(self.center)


@dataclass
class GeometryConfig:
    coordinates: str = "lane"
    center_x: float = 0.0
    center_y: float = 0.0
    ref_radius: float = 25.0
    homography: list[float] | None = None

    def __post_init__(self):
        if self.coordinates not in ("lane", "cartesian"):
            raise ConfigurationError(f"geometry.coordinates must be lane|cartesian, got {self.coordinates!r}")
        _check_positive(self, ["ref_radius"])
        if self.homography is not None and len(self.homography) != 9:
            raise ConfigurationError("geometry.homography needs 9 row-major numbers")


@dataclass
class PhysicsConfig:
    L_B: float = 1.8
    sigma_p: float = 0.05
    sigma_phi: float = 0.05
    sigma_v: float = 0.1
    sigma_m: float = 0.1
    init_cov_scale: float = 10.0
    delta_max_deg: float = 45.0
    v_min: float = 0.1
    heading_rate_window: int = 25

    def __post_init__(self):
        _check_positive(self, ["L_B", "sigma_p", "sigma_phi", "sigma_v", "sigma_m",
                               "init_cov_scale", "delta_max_deg", "v_min", "heading_rate_window"])


@dataclass
class SocialConfig:
    lambda_h: float = 0.05
    lambda_p: float = -0.05
    topology: str = "full"
    anticipation: str = "on"
    decay: str = "on"
    dropout: float = 0.1

    def __post_init__(self):
        if self.lambda_h < 0 or self.lambda_p > 0:
            raise ConfigurationError("decay rates need lambda_h >= 0 and lambda_p <= 0")
        if self.topology not in ("full", "star"):
            raise ConfigurationError(f"social.topology must be full|star, got {self.topology!r}")
        for name in ("anticipation", "decay"):
            value = getattr(self, name)
            if isinstance(value, bool):
                value = "on" if value else "off"
                setattr(self, name, value)
            if value not in ("on", "off"):
                raise ConfigurationError(f"social.{name} must be on|off, got {value!r}")

    @property
    def effective_lambdas(self):
        if self.decay == "off":
            return 0.0, 0.0
        return self.lambda_h, self.lambda_p


@dataclass
class OutputConfig:
    mode: str = "multimodal"
    K: int = 3
    sampler: str = "expected"

    def __post_init__(self):
        if self.mode not in ("unimodal", "multimodal"):
            raise ConfigurationError(f"output.mode must be unimodal|multimodal, got {self.mode!r}")
        if self.sampler not in ("expected", "most_probable", "best_mode"):
            raise ConfigurationError(f"unknown sampler {self.sampler!r}")
        _check_positive(self, ["K"])


@dataclass
class ModelConfig:
    """Which submodules are active and the shared layer widths."""

    name: str = "gatsbi"
    hidden: int = 64
    coord_scale: float = 10.0

    def __post_init__(self):
        if self.name not in ("gatsbi", "physics_module", "social_module"):
            raise ConfigurationError(f"model.name must be gatsbi|physics_module|social_module, got {self.name!r}")
        _check_positive(self, ["hidden", "coord_scale"])

    @property
    def use_physics(self):
        return self.name in ("gatsbi", "physics_module")

    @property
    def use_social(self):
        return self.name in ("gatsbi", "social_module")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    loss: str | None = None
    folds: list[int] | None = None
    ablation: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        _check_positive(self, ["epochs", "batch_size"])
        if self.loss not in (None, "ade", "mixture_nll"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")


SECTIONS = {
    "dataset": DatasetConfig,
    "generator": GeneratorConfig,
    "geometry": GeometryConfig,
    "physics": PhysicsConfig,
    "social": SocialConfig,
    "output": OutputConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    social: SocialConfig = field(default_factory=SocialConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, data: dict | None) -> "Config":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name) or {}
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigurationError(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        def plain(value):
            if isinstance(value, tuple):
                return list(value)
            return value

        return {
            name: {k: plain(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
            for name in SECTIONS
        }

    def replace(self, **sections) -> "Config":
        """Return a copy with whole sections or ``section.key`` values swapped in."""
        data = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                section, name = key.split("__", 1)
                data[section][name] = value
            else:
                data[key] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
        return Config.from_dict(data)


def load_config(path: str | os.PathLike | None = None, apply_env: bool = True) -> Config:
    data = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    cfg = Config.from_dict(data)
    if apply_env:
        cfg = apply_seed_override(cfg)
    return cfg


def apply_seed_override(cfg: Config) -> Config:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc
    return cfg.replace(dataset__seed=seed, train__seed=seed)


def dump_config(cfg: Config, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
