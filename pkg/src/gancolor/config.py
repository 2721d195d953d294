"""Typed configuration for models, datasets and the two training stages.

Configs are plain dataclasses. They round-trip through a flat `key = value`
text format (dotted keys for nesting) so that a run is fully described by one
small file; CLI flags override file values key-by-key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .tensorstore import read_meta, write_meta


def _default_channels(resolution: int, base: int) -> tuple[int, ...]:
    # widths for up-block outputs at scales 8, 16, ..., resolution
    n_blocks = max(1, (resolution // 8).bit_length())
    return tuple(min(8 * base, base * 2 ** (n_blocks - 1 - i)) for i in range(n_blocks))


@dataclass
class GeneratorSpec:
    """Architecture of the class-conditional generator producing the color prior."""

    d_z: int = 64
    n_classes: int = 4
    resolution: int = 64
    base_channels: int = 64
    embed_dim: int = 32
    attn_scale: int = 32  # self-attention block sits at min(attn_scale, R/2)
    seed: int = 0
    channels: tuple[int, ...] = ()

    def __post_init__(self):
        r = self.resolution
        if r < 32 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 32, got {r}")
        if not self.channels:
            self.channels = _default_channels(r, self.base_channels)
        else:
            self.channels = tuple(self.channels)

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(8 * 2**i for i in range(len(self.channels)))


@dataclass
class EncoderSpec:
    """Architecture of the grayscale-to-latent encoder; must pair a GeneratorSpec."""

    resolution: int = 64
    d_z: int = 64
    n_classes: int = 4
    base_channels: int = 64
    embed_dim: int = 32

    @classmethod
    def for_generator(cls, gen: GeneratorSpec) -> "EncoderSpec":
        return cls(
            resolution=gen.resolution,
            d_z=gen.d_z,
            n_classes=gen.n_classes,
            base_channels=gen.base_channels,
            embed_dim=gen.embed_dim,
        )


@dataclass
class StageConfig:
    lr: float = 1e-5
    epochs: int = 10
    batch: int = 8
    steps: int = 0  # >0 replaces the epoch count with a fixed step budget

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.steps < 0:
            raise ValueError("epochs/steps must be >= 0")


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-5))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-4))
    weights: LossWeights = field(default_factory=LossWeights)
    resolution: int = 64
    seed: int = 0
    linear_decay: bool = True
    adam_beta1_gan: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    single_thread_loading: bool = True


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | image-folder
    n_images: int = 2000
    n_classes: int = 4
    resolution: int = 64
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "image-folder"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.n_images < self.n_classes:
            raise ValueError("need at least one image per class")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")


# -- flat key=value round trip ----------------------------------------------


def to_flat(obj, prefix: str = "") -> dict:
    """Flatten a (possibly nested) dataclass into dotted scalar keys."""
    flat = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            flat.update(to_flat(v, prefix=key + "."))
        else:
            flat[key] = list(v) if isinstance(v, tuple) else v
    return flat


def apply_flat(obj, flat: dict):
    """Return a copy of dataclass `obj` with dotted keys from `flat` applied."""
    own: dict = {}
    nested: dict[str, dict] = {}
    for k, v in flat.items():
        if "." in k:
            head, rest = k.split(".", 1)
            nested.setdefault(head, {})[rest] = v
        else:
            own[k] = v
    updates = {}
    names = {f.name: f for f in dataclasses.fields(obj)}
    for k, v in own.items():
        if k not in names:
            raise KeyError(f"unknown config key {k!r} for {type(obj).__name__}")
        current = getattr(obj, k)
        if isinstance(current, bool):
            v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
        elif isinstance(current, int) and not isinstance(v, bool):
            v = int(v)
        elif isinstance(current, float):
            v = float(v)
        elif isinstance(current, tuple):
            v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        updates[k] = v
    for k, sub in nested.items():
        if k not in names:
            raise KeyError(f"unknown config section {k!r} for {type(obj).__name__}")
        updates[k] = apply_flat(getattr(obj, k), sub)
    return dataclasses.replace(obj, **updates)


def save_config(obj, path) -> None:
    write_meta(Path(path), to_flat(obj))


def load_config(cls, path, overrides: dict | None = None):
    """Build a `cls` from a flat key=value file, then apply CLI overrides."""
    flat = read_meta(Path(path)) if path is not None else {}
    if overrides:
        flat.update(overrides)
    return apply_flat(cls(), flat)
