"""Image encoder stand-in with SAM output geometry (stride 16).

A small strided convolutional stack replaces the ViT-B backbone. Every conv
is followed by a per-sample GroupNorm(1) (layer norm over C, H, W), which
trains far faster from scratch than the bare stack. Each of the
four stride-2 stages can carry a residual bottleneck adapter whose output
projection is zero-initialised, so enabling adapters does not change the
forward pass until they are trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn as nn

STRIDE = 16
NUM_STAGES = 4


@dataclass
class EncoderConfig:
    channels: int = 32
    depth: int = 1
    adapter_enabled: bool = True
    freeze_backbone: bool = False
    seed: int = 0
    adapter_ratio: int = 4
    norm: bool = True
    pixel_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)

    def stage_widths(self) -> Tuple[int, ...]:
        c = self.channels
        return (max(c // 4, 4), max(c // 2, 4), c, c)


class Adapter(nn.Module):
    """Residual bottleneck: x + up(gelu(down(x))), with ``up`` zero-initialised."""

    def __init__(self, channels: int, ratio: int = 4):
        super().__init__()
        hidden = max(channels // ratio, 1)
        self.down = nn.Conv2d(channels, hidden, 1)
        self.act = nn.GELU()
        self.up = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return x + self.up(self.act(self.down(x)))


class _Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, depth: int, norm: bool = True):
        super().__init__()
        make_norm = (lambda: nn.GroupNorm(1, out_ch)) if norm else nn.Identity
        layers = [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), make_norm(), nn.GELU()]
        for _ in range(depth - 1):
            layers += [nn.Conv2d(out_ch, out_ch, 3, padding=1), make_norm(), nn.GELU()]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ImageEncoder(nn.Module):
    """Maps a normalised ``(B, 3, H, W)`` batch to ``(B, C, H/16, W/16)``."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            widths = config.stage_widths()
            in_chs = (3,) + widths[:-1]
            self.stages = nn.ModuleList(
                _Stage(i, o, config.depth, config.norm) for i, o in zip(in_chs, widths)
            )
            self.neck = nn.Conv2d(widths[-1], config.channels, 1)
            if config.adapter_enabled:
                self.adapters = nn.ModuleList(
                    Adapter(w, config.adapter_ratio) for w in widths
                )
            else:
                self.adapters = None
        finally:
            torch.random.set_rng_state(gen_state)
        self.apply_freeze()

    def apply_freeze(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(not self.config.freeze_backbone or name.startswith("adapters."))

    def backbone_parameters(self) -> Dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("adapters.")}

    def adapter_parameters(self) -> Dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith("adapters.")}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_image(x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if self.adapters is not None:
                x = self.adapters[i](x)
        return self.neck(x)


def check_image(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected image batch of shape (B, 3, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}x{w} is not divisible by {STRIDE}")
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite pixel values")


def encode(image: torch.Tensor, encoder: ImageEncoder) -> torch.Tensor:
    """Encode a single ``(3, H, W)`` image or a batch; returns matching rank."""
    single = image.dim() == 3
    out = encoder(image.unsqueeze(0) if single else image)
    return out[0] if single else out


def trainable_parameters(encoder: ImageEncoder) -> Dict[str, nn.Parameter]:
    """Parameters that receive optimizer updates under the freeze contract."""
    return {n: p for n, p in encoder.named_parameters() if p.requires_grad}
