"""Run configuration: defaults, flat key=value files, flag overrides.

Precedence is defaults < config file < command-line flags. The file format
is one ``key = value`` per line with ``#`` comments, diff-friendly and
parseable anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import PatchConfig
from .geometry import AffineConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed config file or inconsistent settings."""


@dataclass
class RunConfig:
    # image/token geometry
    height: int = 64
    width: int = 32
    channels: int = 3
    patch: int = 8
    stride: int = 8
    dim: int = 64
    dips: int = 4
    layers: int = 4
    heads: int = 4
    dropout: float = 0.0
    # optimization
    epochs: int = 200
    batch: int = 32
    p_ids: int = 8
    k_imgs: int = 4
    lr: float = 0.04
    momentum: float = 0.9
    warmup_epochs: int = 5
    erase_prob: float = 0.5
    seed: int = 0
    eval_every: int = 10
    checkpoint_every: int = 0
    # loss coefficients
    lambda_id: float = 1.0
    lambda_t: float = 1.0
    lambda_pe: float = 1.0
    margin: float = 0.3
    # toggles
    transform: bool = True
    weighting: bool = True
    camera_filter: bool = True
    # transformed-branch sampling ranges
    translate: float = 0.12
    scale_min: float = 0.9
    scale_max: float = 1.1
    hflip_prob: float = 0.5
    # synthetic data
    ids: int = 16
    images_per_id: int = 8
    query_per_id: int = 2
    gallery_per_id: int = 4
    occlusion_rate: float = 0.0

    def patch_config(self):
        try:
            return PatchConfig(
                H=self.height, W=self.width, C=self.channels, P=self.patch,
                S=self.stride, D=self.dim, M=self.dips, L=self.layers,
                heads=self.heads, dropout=self.dropout,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self):
        try:
            return TrainConfig(
                epochs=self.epochs, batch_size=self.batch,
                p_ids=self.p_ids, k_imgs=self.k_imgs,
                lr0=self.lr, momentum=self.momentum,
                warmup_epochs=self.warmup_epochs, erase_prob=self.erase_prob,
                lambda_id=self.lambda_id, lambda_t=self.lambda_t,
                lambda_pe=self.lambda_pe, margin=self.margin,
                use_transform=self.transform, use_weighting=self.weighting,
                seed=self.seed, eval_every=self.eval_every,
                checkpoint_every=self.checkpoint_every,
                affine=self.affine_config(),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def affine_config(self):
        return AffineConfig(
            translate=self.translate, scale_min=self.scale_min,
            scale_max=self.scale_max, hflip_prob=self.hflip_prob,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return int(raw) if kind == "int" else float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def parse_config_file(path):
    """Read a flat key=value file into a dict of typed values."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def build_config(file_path=None, overrides=None):
    """Defaults, then file values, then non-None overrides."""
    cfg = RunConfig()
    if file_path is not None:
        if not Path(file_path).exists():
            raise ConfigError(f"config file not found: {file_path}")
        for key, value in parse_config_file(file_path).items():
            setattr(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg


def write_config_file(path, cfg: RunConfig):
    lines = ["# dipnet run configuration"]
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n")
