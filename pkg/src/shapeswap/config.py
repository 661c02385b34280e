"""Run configuration: one structured TOML file drives the whole pipeline.

Unknown keys are rejected at load time, and a content hash of the fully
resolved config is embedded in every artifact (dataset manifest, checkpoints,
eval reports) so stages can refuse to run on mismatched inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration or CLI arguments (exit code 1)."""


class TrainingDiverged(RuntimeError):
    """A loss went non-finite during training (exit code 2)."""


DATA_DIR_ENV = "FLOWFACE_DATA_DIR"


@dataclass
class DataConfig:
    identities: int = 8
    per_identity: int = 29
    val_per_identity: int = 4
    image_size: int = 64
    master_seed: int = 1234


@dataclass
class Face3DConfig:
    vertices: int = 512
    shape_dim: int = 8
    expr_dim: int = 4
    joints: int = 2
    model_seed: int = 7
    landmarks: int = 17


@dataclass
class EncoderConfig:
    patch_size: int = 16
    width: int = 128
    depth: int = 4
    heads: int = 4
    mask_ratio: float = 0.75
    decoder_width: int = 64
    decoder_depth: int = 2
    steps: int = 2000
    batch_size: int = 8


@dataclass
class ReshapeConfig:
    base_width: int = 32
    levels: int = 4
    heatmap_sigma: float = 2.0
    steps: int = 2000
    batch_size: int = 8
    recon_prob: float = 0.10
    lambda_rec: float = 10.0
    lambda_ldmk: float = 800.0


@dataclass
class SwapConfig:
    heads: int = 4
    decoder_base_width: int = 16
    steps: int = 4000
    batch_size: int = 8
    recon_prob: float = 0.25
    lambda_rec: float = 10.0
    lambda_id: float = 5.0
    lambda_exp: float = 10.0
    lambda_ldmk: float = 5000.0
    lambda_perc: float = 2.0


@dataclass
class AuxConfig:
    steps: int = 1200
    batch_size: int = 16
    id_embed_dim: int = 64
    exp_embed_dim: int = 16


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99


@dataclass
class PathsConfig:
    data_dir: str = ""
    out_dir: str = "runs"

    def resolved_data_dir(self) -> Path:
        if self.data_dir:
            return Path(self.data_dir)
        env = os.environ.get(DATA_DIR_ENV)
        if env:
            return Path(env)
        return Path("data")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    face3d: Face3DConfig = field(default_factory=Face3DConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reshape: ReshapeConfig = field(default_factory=ReshapeConfig)
    swap: SwapConfig = field(default_factory=SwapConfig)
    aux: AuxConfig = field(default_factory=AuxConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self) -> None:
        d, f = self.data, self.face3d
        if d.identities < 1 or d.per_identity < 1:
            raise ConfigError("data.identities and data.per_identity must be >= 1")
        if d.val_per_identity >= d.per_identity:
            raise ConfigError("data.val_per_identity must be < data.per_identity")
        if d.image_size % self.encoder.patch_size != 0:
            raise ConfigError(
                f"image_size {d.image_size} not divisible by patch_size "
                f"{self.encoder.patch_size}"
            )
        if f.vertices < 64 or min(f.shape_dim, f.expr_dim, f.joints) < 1:
            raise ConfigError("face3d dims must be positive with vertices >= 64")
        if f.landmarks != 17:
            raise ConfigError("contour landmark count is fixed at 17")
        if self.encoder.width % self.encoder.heads != 0:
            raise ConfigError("encoder.width must be divisible by encoder.heads")
        if not (0.0 < self.encoder.mask_ratio < 1.0):
            raise ConfigError("encoder.mask_ratio must be in (0, 1)")
        for name in ("reshape", "swap"):
            sec = getattr(self, name)
            if not (0.0 <= sec.recon_prob <= 1.0):
                raise ConfigError(f"{name}.recon_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_SECTION_TYPES = {
    "data": DataConfig,
    "face3d": Face3DConfig,
    "encoder": EncoderConfig,
    "reshape": ReshapeConfig,
    "swap": SwapConfig,
    "aux": AuxConfig,
    "optim": OptimConfig,
    "paths": PathsConfig,
}


def _fill_section(cls, table: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        want = known[key].type
        if want in ("int", int) and isinstance(value, bool):
            raise ConfigError(f"{where}.{key}: expected int, got bool")
        if want in ("float", float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(_SECTION_TYPES) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config sections/keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            setattr(cfg, name, _fill_section(cls, raw[name], name))
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from None
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` CLI overrides on top of a loaded config."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) == 1 and parts[0] == "seed":
            raw["seed"] = int(value)
            continue
        if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
            raise ConfigError(f"unknown override target: {dotted!r}")
        section, key = parts
        fields = {f.name: f for f in dataclasses.fields(_SECTION_TYPES[section])}
        if key not in fields:
            raise ConfigError(f"unknown override key: {dotted!r}")
        current = raw[section][key]
        try:
            if isinstance(current, bool):
                parsed = value.strip().lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(f"bad value for {dotted}: {value!r}") from None
        raw[section][key] = parsed
    return config_from_dict(raw)
