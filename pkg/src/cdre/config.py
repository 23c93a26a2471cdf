"""Run configuration: sectioned dataclasses serialized as JSON.

Every field has a default. Unknown sections or keys are rejected on load so
typos fail loudly instead of silently running the default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_eval: int = 500
    image_size: int = 64


@dataclass
class CodecConfig:
    train_qualities: list = field(default_factory=lambda: [10, 30, 50, 70])


@dataclass
class BackboneConfig:
    family: str = "cnn"
    dims: list | None = None  # None -> family default


@dataclass
class CDREConfig:
    latent_channels: int = 6
    embedding_depth: int = 4
    multi_scale: bool = True
    cosine: bool = True
    modulation: bool = True
    heads: int = 2


@dataclass
class TrainingConfig:
    regime: str = "fd"
    lam: float = 0.1
    steps: int = 2000
    pretrain_steps: int = 1000
    lr: float = 1e-3
    backbone_lr: float = 1e-4
    pretrain_lr: float = 5e-4
    batch_size: int = 32
    log_every: int = 100


@dataclass
class EvalConfig:
    qualities: list = field(default_factory=lambda: [10, 30, 50, 70])
    include_side_channel: bool = True
    batch_size: int = 250


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cdre: CDREConfig = field(default_factory=CDREConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.backbone.family not in ("cnn", "transformer"):
            raise ValueError(f"backbone.family must be 'cnn' or 'transformer', got {self.backbone.family!r}")
        if self.training.regime not in ("fd", "joint"):
            raise ValueError(f"training.regime must be 'fd' or 'joint', got {self.training.regime!r}")
        if self.training.lam < 0:
            raise ValueError("training.lam must be >= 0")
        if self.training.steps <= 0:
            raise ValueError("training.steps must be > 0")
        if not 1 <= self.cdre.embedding_depth <= 4:
            raise ValueError("cdre.embedding_depth must be in [1, 4]")
        if self.cdre.latent_channels <= 0:
            raise ValueError("cdre.latent_channels must be > 0")
        for q in list(self.codec.train_qualities) + list(self.eval.qualities):
            if not 1 <= int(q) <= 99:
                raise ValueError(f"quality {q} out of [1, 99]")

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            sub = _SECTIONS.get(key)
            if sub is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            known = {f.name for f in dataclasses.fields(sub)}
            bad = set(value) - known
            if bad:
                raise ValueError(f"unknown config key(s) in [{key}]: {sorted(bad)}")
            kwargs[key] = sub(**value)
        return cls(**kwargs)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n")

    def replace(self, **dotted):
        """Copy with dotted-key overrides, e.g. ``replace(**{"cdre.latent_channels": 3})``."""
        data = self.to_dict()
        for key, value in dotted.items():
            node = data
            *path, leaf = key.split(".")
            for p in path:
                node = node[p]
            if leaf not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(data)

    def stage_dims(self):
        from .backbones import CNN_DIMS, TRANSFORMER_DIMS

        if self.backbone.dims:
            return tuple(self.backbone.dims)
        return CNN_DIMS if self.backbone.family == "cnn" else TRANSFORMER_DIMS


_SECTIONS = {
    "dataset": DatasetConfig,
    "codec": CodecConfig,
    "backbone": BackboneConfig,
    "cdre": CDREConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
}


def derive_seed(root: int, *tags) -> int:
    """Stable child seed for a named consumer of the root seed."""
    h = hashlib.sha256(repr((int(root),) + tags).encode()).digest()
    return int.from_bytes(h[:4], "big")
