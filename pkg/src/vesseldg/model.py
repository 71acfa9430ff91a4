"""Full segmentation pipeline: encoder -> modulation/fusion -> refinement decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from .encoder import EncoderConfig, ImageEncoder
from .fadf import DomainWeights, FrequencyPrototype, decomposer_for, fusion_weights, gap, similarities
from .hmpr import HierarchicalRefiner, RefineOutput
from .sdm import SpectralDomainModulator

CHECKPOINT_SCHEMA = 1


@dataclass
class ModuleFlags:
    sdm: bool = True
    fadf: bool = True
    hmpr: bool = True
    low_branch: bool = True
    high_branch: bool = True

    def label(self) -> str:
        on = [n for n in ("sdm", "fadf", "hmpr") if getattr(self, n)]
        name = "+".join(on) if on else "baseline"
        if self.sdm and not (self.low_branch and self.high_branch):
            bands = [b for b, f in (("low", self.low_branch), ("high", self.high_branch)) if f]
            name += "[" + ("+".join(bands) if bands else "no-bands") + "]"
        return name


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_domains: int = 4
    flags: ModuleFlags = field(default_factory=ModuleFlags)
    tau: float = 0.5
    alpha_init: float = 0.1
    token_std: float = 0.02
    decoder_depth: int = 2
    decoder_heads: int = 2
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["flags"] = ModuleFlags(**d.get("flags", {}))
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder"]["pixel_mean"] = list(self.encoder.pixel_mean)
        out["encoder"]["pixel_std"] = list(self.encoder.pixel_std)
        return out


class SegmentationModel(nn.Module):
    """Encoder, optional spectral modulator / token bank and refinement decoder.

    The token bank exists whenever SDM or FADF is on: with SDM off and FADF
    on it modulates the raw encoder features. Disabled parts are absent from
    the state dict.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        flags = config.flags
        rng_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            self.encoder = ImageEncoder(config.encoder)
            c = config.encoder.channels
            if flags.sdm or flags.fadf:
                self.sdm = SpectralDomainModulator(
                    c, config.num_domains, wavelet=flags.sdm,
                    low_branch=flags.low_branch, high_branch=flags.high_branch,
                    alpha_init=config.alpha_init, token_std=config.token_std,
                )
            else:
                self.sdm = None
            self.hmpr = HierarchicalRefiner(c, stage2=flags.hmpr, depth=config.decoder_depth,
                                            num_heads=config.decoder_heads)
        finally:
            torch.random.set_rng_state(rng_state)
        self.prototypes: Optional[list] = None

    @property
    def flags(self) -> ModuleFlags:
        return self.config.flags

    def set_prototypes(self, prototypes: Sequence[FrequencyPrototype]) -> None:
        ids = sorted(p.domain_id for p in prototypes)
        if ids != list(range(self.config.num_domains)):
            raise ValueError(f"prototypes cover {ids}, model has {self.config.num_domains} domains")
        self.prototypes = sorted(prototypes, key=lambda p: p.domain_id)

    def domain_weights(self, feature: torch.Tensor) -> DomainWeights:
        if self.prototypes is None:
            raise RuntimeError("FADF is enabled but no frequency prototypes are loaded")
        low, high = decomposer_for(self.sdm)(feature)
        sims = similarities(gap(low).double(), gap(high).double(), self.prototypes)
        return fusion_weights(sims, self.config.tau)

    def modulate(self, feature: torch.Tensor, domain_ids=None, fused: Optional[bool] = None):
        """Feature modulation for training (known ids) or inference.

        ``fused=None`` picks FADF fusion at inference when enabled; without
        FADF a known domain id selects its token and an unknown one averages
        all tokens uniformly. Fusion is applied as ``F_wave + sum_k w_k t_k``,
        which equals the weighted sum of the K modulated variants because the
        weights sum to one.
        """
        if self.sdm is None:
            return feature
        if fused is None:
            fused = self.flags.fadf and not self.training
        if not fused and domain_ids is not None:
            return self.sdm(feature, domain_ids)
        f_wave = self.sdm.wave(feature)
        if fused:
            w = self.domain_weights(feature).weights
        else:
            k = self.config.num_domains
            w = torch.full((feature.shape[0], k), 1.0 / k, dtype=torch.float64)
        offsets = w.to(feature.dtype) @ self.sdm.token_offsets()
        return f_wave + offsets[:, :, None, None]

    def forward(self, images: torch.Tensor, domain_ids=None, fused: Optional[bool] = None) -> RefineOutput:
        feature = self.encoder(images)
        feature = self.modulate(feature, domain_ids, fused)
        return self.hmpr(feature, images.shape[-2:])


def save_checkpoint(path: Union[str, Path], model: SegmentationModel, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "schema_version": CHECKPOINT_SCHEMA,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path: Union[str, Path], expect_channels: Optional[int] = None):
    """Returns ``(model, extra)``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {blob.get('schema_version')}")
    config = ModelConfig.from_dict(blob["model_config"])
    if expect_channels is not None and config.encoder.channels != expect_channels:
        raise ValueError(
            f"{path}: checkpoint has C={config.encoder.channels}, expected C={expect_channels}"
        )
    model = SegmentationModel(config)
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("extra", {})
