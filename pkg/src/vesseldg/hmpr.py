"""Hierarchical mask-prompt refinement decoder.

Stage 1 is a reduced-width SAM-style decoder (two-way attention between
output tokens and image tokens, transposed-conv upsampling, hypernetwork
mask head) producing logits at 4x the feature grid. Its logits are embedded
as a dense mask prompt, passed through self-attention over spatial prompt
tokens, and fed with the same features to stage 2, whose upsampling path
has one more 2x step. The final mask is a bilinear resize to image size.

With ``stage2=False`` the module is the plain single-stage decoder.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention over ``(B, N, D)`` sequences."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.num_heads, d // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        b, h, n, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * c))


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_dim: int, skip_first_pe: bool):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        queries = self.norm2(queries + self.cross_t2i(queries + query_pe, keys + key_pe, keys))
        queries = self.norm3(queries + self.mlp(queries))
        keys = self.norm4(keys + self.cross_i2t(keys + key_pe, queries + query_pe, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, num_heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth)
        )
        self.final_attn = Attention(dim, num_heads)
        self.norm_final = nn.LayerNorm(dim)

    def forward(self, image, image_pe, tokens):
        keys = image.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        queries = self.norm_final(
            queries + self.final_attn(queries + tokens, keys + key_pe, keys)
        )
        return queries, keys


def sine_position_encoding(dim: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, ``(dim, h, w)``."""
    if dim % 4:
        raise ValueError("position encoding dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    ay = ys[:, None] * freqs[None]
    ax = xs[:, None] * freqs[None]
    pe = torch.cat([
        ay.sin()[:, None, :].expand(h, w, quarter),
        ay.cos()[:, None, :].expand(h, w, quarter),
        ax.sin()[None, :, :].expand(h, w, quarter),
        ax.cos()[None, :, :].expand(h, w, quarter),
    ], dim=-1)
    return pe.permute(2, 0, 1).to(dtype)


class DecoderStage(nn.Module):
    """Token/image two-way attention followed by ``num_up`` 2x upsampling steps."""

    def __init__(self, dim: int, num_up: int, depth: int = 2, num_heads: int = 2,
                 mlp_dim: Optional[int] = None, up_dims: Optional[Tuple[int, ...]] = None):
        super().__init__()
        mlp_dim = mlp_dim or 2 * dim
        up_dims = tuple(up_dims or _default_up_dims(dim, num_up))
        if len(up_dims) != num_up:
            raise ValueError(f"need {num_up} upsampling widths, got {up_dims}")
        self.num_up = num_up
        self.transformer = TwoWayTransformer(dim, depth, num_heads, mlp_dim)
        self.iou_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        layers = []
        prev = dim
        for i, width in enumerate(up_dims):
            layers.append(nn.ConvTranspose2d(prev, width, 2, stride=2))
            if i == 0:
                layers.append(LayerNorm2d(width))
            layers.append(nn.GELU())
            prev = width
        self.upscale = nn.Sequential(*layers)
        self.hyper = MLP(dim, dim, prev, 3)

    def forward(self, image, sparse, dense):
        """Returns ``(logits (B,1,h*2^n,w*2^n), iou_token_out (B, D))``."""
        if dense.shape != image.shape:
            raise ValueError(
                f"dense prompt shape {tuple(dense.shape)} != features {tuple(image.shape)}"
            )
        b, c, h, w = image.shape
        out_tokens = torch.cat([self.iou_token, self.mask_token], dim=0)
        out_tokens = out_tokens[None].expand(b, -1, -1).to(image.dtype)
        tokens = torch.cat([out_tokens, sparse.expand(b, -1, -1)], dim=1)
        pe = sine_position_encoding(c, h, w, image.dtype)[None].expand(b, -1, -1, -1)
        hs, src = self.transformer(image + dense, pe, tokens)
        src = src.transpose(1, 2).reshape(b, c, h, w)
        up = self.upscale(src)
        hyper = self.hyper(hs[:, 1])
        bb, cc, hh, ww = up.shape
        logits = (hyper[:, None] @ up.reshape(bb, cc, hh * ww)).reshape(bb, 1, hh, ww)
        return logits, hs[:, 0]


def _default_up_dims(dim: int, num_up: int) -> Tuple[int, ...]:
    base = [dim, max(dim // 2, 4)]
    return tuple(base + [base[-1]] * (num_up - 2))[:num_up]


class PromptSelfAttention(nn.Module):
    """Self-attention over spatial dense-prompt tokens, no positional encoding."""

    def __init__(self, dim: int, num_heads: int = 2):
        super().__init__()
        self.attn = Attention(dim, num_heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, dense):
        b, c, h, w = dense.shape
        tokens = dense.flatten(2).transpose(1, 2)
        return self.tokens_forward(tokens).transpose(1, 2).reshape(b, c, h, w)

    def tokens_forward(self, tokens):
        return self.norm(tokens + self.attn(tokens, tokens, tokens))


class MaskPromptEncoder(nn.Module):
    """Embeds ``(B, 1, 4h, 4w)`` mask logits as ``(B, C, h, w)`` dense prompts.

    The downscaling path has no bias terms, so an all-zero mask embeds to
    exactly the learned no-mask embedding.
    """

    def __init__(self, dim: int, num_heads: int = 2):
        super().__init__()
        mid = max(dim // 4, 4)
        self.mask_down = nn.Sequential(
            nn.Conv2d(1, mid, 2, stride=2, bias=False),
            nn.GELU(),
            nn.Conv2d(mid, dim, 2, stride=2, bias=False),
            nn.GELU(),
            nn.Conv2d(dim, dim, 1, bias=False),
        )
        self.attn = PromptSelfAttention(dim, num_heads)

    def embed(self, mask_logits, no_mask):
        return no_mask[None, :, None, None] + self.mask_down(mask_logits)

    def forward(self, mask_logits, no_mask):
        return self.attn(self.embed(mask_logits, no_mask))


class PromptBank(nn.Module):
    def __init__(self, dim: int, with_mask_encoder: bool, num_heads: int = 2):
        super().__init__()
        self.sparse = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.no_mask = nn.Parameter(torch.randn(dim) * 0.02)
        self.mask = MaskPromptEncoder(dim, num_heads) if with_mask_encoder else None

    def initial(self, image):
        b, c, h, w = image.shape
        dense = self.no_mask[None, :, None, None].expand(b, c, h, w).to(image.dtype)
        return self.sparse[None].to(image.dtype), dense


class RefineOutput(NamedTuple):
    final: torch.Tensor
    coarse: torch.Tensor
    fine: Optional[torch.Tensor]
    iou_coarse: torch.Tensor
    iou_fine: Optional[torch.Tensor]

    @property
    def iou(self) -> torch.Tensor:
        return self.iou_fine if self.iou_fine is not None else self.iou_coarse


class HierarchicalRefiner(nn.Module):
    def __init__(self, dim: int, stage2: bool = True, depth: int = 2, num_heads: int = 2,
                 mlp_dim: Optional[int] = None):
        super().__init__()
        self.dim = dim
        self.stage1 = DecoderStage(dim, 2, depth, num_heads, mlp_dim)
        self.stage2 = DecoderStage(dim, 3, depth, num_heads, mlp_dim) if stage2 else None
        self.prompt = PromptBank(dim, with_mask_encoder=stage2, num_heads=num_heads)
        heads = {"stage1": MLP(dim, dim, 1, 3)}
        if stage2:
            heads["stage2"] = MLP(dim, dim, 1, 3)
        self.iou_head = nn.ModuleDict(heads)

    @property
    def enabled(self) -> bool:
        return self.stage2 is not None

    def _check(self, feature):
        if feature.dim() != 4 or feature.shape[1] != self.dim:
            raise ValueError(f"expected features (B, {self.dim}, h, w), got {tuple(feature.shape)}")

    def decode_stage1(self, feature, prompts=None):
        self._check(feature)
        sparse, dense = prompts if prompts is not None else self.prompt.initial(feature)
        logits, tok = self.stage1(feature, sparse, dense)
        return logits, torch.sigmoid(self.iou_head["stage1"](tok)[:, 0])

    def mask_to_prompt(self, coarse_logits):
        if self.prompt.mask is None:
            raise RuntimeError("mask prompts need the second stage enabled")
        dense = self.prompt.mask(coarse_logits, self.prompt.no_mask.to(coarse_logits.dtype))
        return self.prompt.sparse[None].to(coarse_logits.dtype), dense

    def decode_stage2(self, feature, prompts):
        if self.stage2 is None:
            raise RuntimeError("second stage is disabled")
        self._check(feature)
        sparse, dense = prompts
        logits, tok = self.stage2(feature, sparse, dense)
        return logits, torch.sigmoid(self.iou_head["stage2"](tok)[:, 0])

    def forward(self, feature, out_size: Tuple[int, int]) -> RefineOutput:
        coarse, iou1 = self.decode_stage1(feature)
        if self.stage2 is None:
            return RefineOutput(upsample(coarse, out_size), coarse, None, iou1, None)
        fine, iou2 = self.decode_stage2(feature, self.mask_to_prompt(coarse))
        return RefineOutput(upsample(fine, out_size), coarse, fine, iou1, iou2)


def upsample(logits: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    return F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)


def refine(feature: torch.Tensor, refiner: HierarchicalRefiner, out_size) -> RefineOutput:
    return refiner(feature, out_size)
