"""Frequency-adaptive domain fusion.

After training, each source domain is summarised by the spatially pooled
outputs of the low/high frequency decomposer, averaged over its training
images. A test image is compared to every prototype by the mean of the two
cosine similarities; a temperature softmax turns the scores into weights for
mixing the K token-modulated feature variants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import torch

from .sdm import SpectralDomainModulator, haar_bands

STORE_VERSION = 1

Decomposer = Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class FrequencyPrototype:
    low: torch.Tensor
    high: torch.Tensor
    domain_id: int
    sample_count: int

    def __post_init__(self):
        self.low = torch.as_tensor(self.low, dtype=torch.float64)
        self.high = torch.as_tensor(self.high, dtype=torch.float64)
        if self.low.shape != self.high.shape or self.low.dim() != 1:
            raise ValueError("prototype low/high must be equal-length vectors")
        if self.sample_count < 1:
            raise ValueError("prototype needs sample_count >= 1")
        if not (torch.isfinite(self.low).all() and torch.isfinite(self.high).all()):
            raise ValueError(f"prototype for domain {self.domain_id} is not finite")

    @property
    def channels(self) -> int:
        return self.low.numel()


@dataclass
class DomainWeights:
    similarities: torch.Tensor
    weights: torch.Tensor
    temperature: float


def gap(x: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the last two axes."""
    return x.mean(dim=(-2, -1))


def decomposer_for(sdm: Optional[SpectralDomainModulator]) -> Decomposer:
    """Band decomposer used for prototypes and at test time.

    Uses the trained branches; a band whose branch is absent falls back to
    the parameter-free Haar band so prototypes exist for every ablation.
    """

    def decompose(feature: torch.Tensor):
        low = high = None
        if sdm is not None and sdm.has_wavelet:
            low, high = sdm.decompose(feature)
        if low is None or high is None:
            h_low, h_high = haar_bands(feature)
            low = h_low if low is None else low
            high = h_high if high is None else high
        return low, high

    return decompose


def frequency_vectors(features: torch.Tensor, decomposer: Decomposer):
    """Pooled ``(B, C)`` low and high vectors for a feature batch."""
    low, high = decomposer(features)
    return gap(low).double(), gap(high).double()


def compute_prototype(
    features: Union[torch.Tensor, Sequence[torch.Tensor]],
    domain_id: int,
    decomposer: Decomposer,
    batch_size: int = 16,
) -> FrequencyPrototype:
    """Mean over samples of the pooled decomposer outputs."""
    if isinstance(features, torch.Tensor):
        items = list(features) if features.dim() == 4 else [features]
    else:
        items = list(features)
    if not items:
        raise ValueError(f"no samples for domain {domain_id}")
    channels = {f.shape[0] for f in items}
    if len(channels) != 1:
        raise ValueError(f"channel mismatch among samples: {sorted(channels)}")
    low_sum = high_sum = 0
    for start in range(0, len(items), batch_size):
        chunk = torch.stack(items[start:start + batch_size])
        with torch.no_grad():
            lo, hi = frequency_vectors(chunk, decomposer)
        low_sum = low_sum + lo.sum(0)
        high_sum = high_sum + hi.sum(0)
    n = len(items)
    return FrequencyPrototype(low_sum / n, high_sum / n, int(domain_id), n)


def _cos(a: torch.Tensor, b: torch.Tensor, name_a: str, name_b: str) -> torch.Tensor:
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na == 0).any():
        raise ValueError(f"{name_a} vector has zero norm")
    if (nb == 0).any():
        raise ValueError(f"{name_b} vector has zero norm")
    return ((a * b).sum(-1) / (na * nb)).clamp(-1.0, 1.0)


def similarity(test: FrequencyPrototype, domain: FrequencyPrototype) -> float:
    cos_low = _cos(test.low, domain.low, "test.low", f"domain[{domain.domain_id}].low")
    cos_high = _cos(test.high, domain.high, "test.high", f"domain[{domain.domain_id}].high")
    return float(0.5 * (cos_low + cos_high))


def similarities(test_low: torch.Tensor, test_high: torch.Tensor,
                 prototypes: Sequence[FrequencyPrototype]) -> torch.Tensor:
    """Batched scores: ``(B, C)`` test vectors against K prototypes -> ``(B, K)``."""
    cols = []
    for p in prototypes:
        cos_low = _cos(test_low, p.low[None], "test.low", f"domain[{p.domain_id}].low")
        cos_high = _cos(test_high, p.high[None], "test.high", f"domain[{p.domain_id}].high")
        cols.append(0.5 * (cos_low + cos_high))
    return torch.stack(cols, dim=-1)


def fusion_weights(sims, tau: float) -> DomainWeights:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = torch.as_tensor(sims, dtype=torch.float64)
    if s.numel() == 0:
        raise ValueError("need at least one similarity")
    if not torch.isfinite(s).all():
        raise ValueError("similarities must be finite")
    z = s / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return DomainWeights(s, e / e.sum(dim=-1, keepdim=True), float(tau))


def fuse(variants: Sequence[torch.Tensor], weights) -> torch.Tensor:
    """Weighted sum of K same-shape variants.

    ``weights`` is length K, or ``(B, K)`` for per-sample weights over
    ``(B, ...)`` variants.
    """
    if isinstance(weights, DomainWeights):
        weights = weights.weights
    w = torch.as_tensor(weights)
    if w.shape[-1] != len(variants):
        raise ValueError(f"{w.shape[-1]} weights for {len(variants)} variants")
    shape = variants[0].shape
    for v in variants:
        if v.shape != shape:
            raise ValueError(f"variant shape {tuple(v.shape)} differs from {tuple(shape)}")
    w = w.to(variants[0].dtype)
    out = torch.zeros_like(variants[0])
    for k, v in enumerate(variants):
        wk = w[..., k]
        if wk.dim():
            wk = wk.reshape(-1, *([1] * (v.dim() - 1)))
        out = out + wk * v
    return out


def infer_fused(
    feature: torch.Tensor,
    prototypes: Sequence[FrequencyPrototype],
    sdm: SpectralDomainModulator,
    tau: float,
    decomposer: Optional[Decomposer] = None,
):
    """Label-free modulation of a ``(B, C, H, W)`` batch. Returns ``(fused, DomainWeights)``."""
    ids = sorted(p.domain_id for p in prototypes)
    if ids != list(range(sdm.num_domains)):
        raise ValueError(
            f"prototypes cover domains {ids}, model has {sdm.num_domains} domain tokens"
        )
    protos = sorted(prototypes, key=lambda p: p.domain_id)
    decomposer = decomposer or decomposer_for(sdm)
    low, high = decomposer(feature)
    sims = similarities(gap(low).double(), gap(high).double(), protos)
    weights = fusion_weights(sims, tau)
    f_wave = sdm.wave(feature)
    variants = [sdm.modulate(f_wave, k) for k in range(sdm.num_domains)]
    return fuse(variants, weights.weights), weights


def uniform_fused(feature: torch.Tensor, sdm: SpectralDomainModulator) -> torch.Tensor:
    """Equal-weight mix of all token variants (label-free fallback without prototypes)."""
    f_wave = sdm.wave(feature)
    k = sdm.num_domains
    variants = [sdm.modulate(f_wave, i) for i in range(k)]
    return fuse(variants, torch.full((k,), 1.0 / k, dtype=torch.float64))


def save_prototypes(path: Union[str, Path], prototypes: Iterable[FrequencyPrototype]) -> Path:
    protos = sorted(prototypes, key=lambda p: p.domain_id)
    if not protos:
        raise ValueError("no prototypes to save")
    payload = {
        "version": STORE_VERSION,
        "C": protos[0].channels,
        "K": len(protos),
        "domains": [
            {
                "domain_id": p.domain_id,
                "sample_count": p.sample_count,
                # repr of a Python float is the shortest round-tripping form
                "low": [float(v) for v in p.low.tolist()],
                "high": [float(v) for v in p.high.tolist()],
            }
            for p in protos
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def load_prototypes(path: Union[str, Path]) -> List[FrequencyPrototype]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != STORE_VERSION:
        raise ValueError(f"unsupported prototype store version {payload.get('version')}")
    protos = [
        FrequencyPrototype(torch.tensor(d["low"], dtype=torch.float64),
                           torch.tensor(d["high"], dtype=torch.float64),
                           int(d["domain_id"]), int(d["sample_count"]))
        for d in payload["domains"]
    ]
    if len(protos) != payload["K"] or any(p.channels != payload["C"] for p in protos):
        raise ValueError(f"prototype store {path} is inconsistent with its header")
    return protos


def argmax_domain(weights: DomainWeights) -> torch.Tensor:
    return weights.weights.argmax(dim=-1)

