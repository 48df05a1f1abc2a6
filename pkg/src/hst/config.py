"""Run configuration: nested sections, strict validation, stable hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class BackboneSection:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 256
    depth: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_cls_token: bool = False
    num_meta_tokens: int = 1
    ln_eps: float = 1e-5
    init_std: float = 0.02


@dataclass
class HsnSection:
    stage_dims: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    ffn_ratio: float = 4.0
    attn_heads: int = 1
    attn_softmax: bool = True


@dataclass
class BridgeSection:
    bias: bool = True
    # Half-pixel sampling is the one implemented convention; the key exists
    # so the choice is explicit in every saved config.
    align_corners: bool = False


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    cosine_decay: bool = False
    checkpoint_every_epochs: int = 1


@dataclass
class DataSection:
    num_classes: int = 10
    samples_per_class: int = 100
    test_samples_per_class: int = 20
    image_size: int = 64
    noise_std: float = 0.12
    seed: int = 7
    normalize_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    normalize_std: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25])


@dataclass
class TogglesSection:
    ln_tuning: bool = True
    weight_sharing: bool = True
    global_t: bool = True
    fg_injection: bool = True
    hsn_enabled: bool = True


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    hsn: HsnSection = field(default_factory=HsnSection)
    bridge: BridgeSection = field(default_factory=BridgeSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    toggles: TogglesSection = field(default_factory=TogglesSection)

    def validate(self) -> None:
        b, h, t = self.backbone, self.hsn, self.toggles
        if b.image_size % b.patch_size:
            raise ConfigError(
                f"backbone.image_size {b.image_size} not divisible by patch_size {b.patch_size}"
            )
        if b.depth % 4:
            raise ConfigError(f"backbone.depth must be divisible by 4, got {b.depth}")
        if b.embed_dim % b.num_heads:
            raise ConfigError("backbone.embed_dim must be divisible by num_heads")
        if b.num_meta_tokens < 0:
            raise ConfigError("backbone.num_meta_tokens must be >= 0")
        if t.hsn_enabled:
            if b.image_size % 32:
                raise ConfigError(
                    f"backbone.image_size {b.image_size} must be divisible by 32 "
                    "for the four pyramid strides"
                )
            if len(h.stage_dims) != 4:
                raise ConfigError(f"hsn.stage_dims needs 4 entries, got {h.stage_dims}")
            for dim in h.stage_dims:
                if dim % h.attn_heads:
                    raise ConfigError(
                        f"hsn stage dim {dim} not divisible by attn_heads {h.attn_heads}"
                    )
            if b.num_meta_tokens == 0 and not t.global_t:
                raise ConfigError(
                    "side blocks need at least one key/value token: "
                    "set backbone.num_meta_tokens >= 1 or enable toggles.global_t"
                )
        if self.bridge.align_corners:
            raise ConfigError("bridge.align_corners=true is not supported (half-pixel only)")
        if self.train.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if len(self.train.betas) != 2:
            raise ConfigError("train.betas must hold exactly two values")
        if self.data.image_size != b.image_size:
            raise ConfigError(
                f"data.image_size {self.data.image_size} must match backbone.image_size {b.image_size}"
            )
        if self.data.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {f.name: f.type for f in fields(RunConfig)}
_SECTIONS = {
    "backbone": BackboneSection,
    "hsn": HsnSection,
    "bridge": BridgeSection,
    "train": TrainSection,
    "data": DataSection,
    "toggles": TogglesSection,
}


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown sections and keys by dotted name."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config document must be a mapping, got {type(doc).__name__}")
    sections = {}
    for key, value in doc.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        cls = _SECTIONS[key]
        known = {f.name for f in fields(cls)}
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be a mapping")
        for sub in value:
            if sub not in known:
                raise ConfigError(f"unknown config key {key}.{sub!r}")
        sections[key] = cls(**value)
    config = RunConfig(**sections)
    config.validate()
    return config


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    doc = yaml.safe_load(text)
    return config_from_dict(doc if doc is not None else {})


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def config_hash(config: RunConfig) -> bytes:
    """32-byte digest of the fully resolved config (canonical JSON)."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).digest()


def default_config() -> RunConfig:
    config = RunConfig()
    config.validate()
    return config


def tiny_config() -> RunConfig:
    """Desk-scale configuration used across the test and acceptance suites."""
    config = RunConfig(
        backbone=BackboneSection(image_size=32, patch_size=4, embed_dim=64, depth=8),
        hsn=HsnSection(stage_dims=[16, 32, 64, 128]),
        train=TrainSection(learning_rate=3e-3, batch_size=32, epochs=30),
        data=DataSection(image_size=32),
    )
    config.validate()
    return config
