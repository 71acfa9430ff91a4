"""Experiment configuration, YAML I/O and the master-seed splitter."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .encoder import EncoderConfig
from .losses import LossConfig
from .model import ModelConfig, ModuleFlags

PROTOCOLS = ("intra", "lodo", "mixed")
SEED_COMPONENTS = ("data", "init", "shuffle")


def derive_seed(master: int, component: str) -> int:
    """Component seed from the master seed.

    ``sha256("<master>/<component>")``, first 4 bytes big-endian, masked to 31
    bits. Each component (data, init, shuffle) can be rerun alone.
    """
    digest = hashlib.sha256(f"{int(master)}/{component}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


@dataclass
class OptimConfig:
    lr: float = 1e-4
    decay: float = 0.98  # exponential, applied once per epoch
    batch_size: int = 2
    epochs: int = 100
    amp: bool = False
    deep_supervision: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class NetworkConfig:
    channels: int = 32
    depth: int = 1
    adapter: bool = True
    freeze_backbone: bool = False
    decoder_depth: int = 2
    decoder_heads: int = 2
    alpha_init: float = 0.1
    token_std: float = 0.02


@dataclass
class DataConfig:
    root: Optional[str] = None  # folder benchmark; None generates the synthetic one
    n_train: int = 20
    n_test: int = 5
    size: int = 64
    domains: Optional[List[int]] = None  # subset of domain ids; None keeps all

    def __post_init__(self):
        if self.size % 16:
            raise ValueError(f"image size {self.size} is not divisible by 16")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


@dataclass
class ExperimentConfig:
    protocol: str = "lodo"
    target_domain: Optional[int] = None
    flags: ModuleFlags = field(default_factory=ModuleFlags)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tau: float = 0.5
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def component_seed(self, component: str) -> int:
        if component not in SEED_COMPONENTS:
            raise ValueError(f"unknown seed component {component!r}")
        return derive_seed(self.seed, component)

    def model_config(self, num_domains: int) -> ModelConfig:
        n = self.network
        init = self.component_seed("init")
        enc = EncoderConfig(channels=n.channels, depth=n.depth, adapter_enabled=n.adapter,
                            freeze_backbone=n.freeze_backbone, seed=init)
        return ModelConfig(encoder=enc, num_domains=num_domains, flags=copy.deepcopy(self.flags),
                           tau=self.tau, alpha_init=n.alpha_init, token_std=n.token_std,
                           decoder_depth=n.decoder_depth, decoder_heads=n.decoder_heads, seed=init)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        d = dict(d or {})
        _check_keys(cls, d, "")
        sections = {"flags": ModuleFlags, "optim": OptimConfig, "loss": LossConfig,
                    "network": NetworkConfig, "data": DataConfig}
        for key, sub in sections.items():
            if key in d:
                value = d[key] or {}
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be a mapping")
                _check_keys(sub, value, key + ".")
                d[key] = sub(**value)
        return cls(**d)


def _check_keys(cls, d: dict, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def save_config(path: Union[str, Path], config: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config))
    return path


def desk_config(**overrides) -> ExperimentConfig:
    """Desk-scale settings used by the shipped config and the acceptance suite.

    Training from scratch needs a larger step size and width than the
    full-scale defaults, which assume a pretrained backbone; 128x128 images
    give an 8x8 feature grid.
    """
    cfg = ExperimentConfig(
        optim=OptimConfig(lr=1e-3, epochs=10),
        network=NetworkConfig(channels=64),
        data=DataConfig(size=128),
    )
    return cfg.replace(**overrides) if overrides else cfg
