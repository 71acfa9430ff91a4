"""Spectral-guided domain modulation.

Features are split into two learnable frequency bands, recombined with a
learnable residual, and shifted by a per-domain projected token that is
broadcast over space.

The parameter-free Haar transform :func:`dwt_reference` is not in the
training path. It is a numerical reference and the fallback decomposer for
frequency prototypes when a learnable branch is switched off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

_R2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class WaveletFilters:
    phi: tuple
    psi: tuple

    def __post_init__(self):
        if len(self.phi) != len(self.psi) or len(self.phi) < 2:
            raise ValueError("wavelet filters must have equal length >= 2")


HAAR = WaveletFilters(phi=(_R2, _R2), psi=(_R2, -_R2))


class Subbands(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


def _analysis(x: torch.Tensor, taps: Sequence[float], dim: int) -> torch.Tensor:
    """Filter along ``dim`` with stride 2 (correlation, symmetric right padding)."""
    n = x.shape[dim]
    length = len(taps)
    pad = length - 2 + (n % 2)
    if pad:
        idx = torch.arange(n - 1, n - 1 - pad, -1, device=x.device).clamp_min(0)
        x = torch.cat([x, x.index_select(dim, idx)], dim=dim)
    n_out = (n + 1) // 2
    out = 0
    for j, tap in enumerate(taps):
        out = out + tap * x.narrow(dim, j, 2 * n_out - 1).index_select(
            dim, torch.arange(0, 2 * n_out - 1, 2, device=x.device)
        )
    return out


def dwt_reference(feature: torch.Tensor, filters: WaveletFilters = HAAR) -> Subbands:
    """Single-level separable 2-D DWT of a ``(..., H, W)`` tensor.

    The first filter of each subband name runs along the row axis (combining
    vertically adjacent rows), the second along the column axis. Hence
    ``lh`` is psi over rows followed by phi over columns. Odd sizes are
    padded by mirroring the last row/column, so subbands have shape
    ``ceil(H/2) x ceil(W/2)``.
    """
    h, w = feature.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"DWT needs spatial size >= 2x2, got {h}x{w}")
    row_lo = _analysis(feature, filters.phi, -2)
    row_hi = _analysis(feature, filters.psi, -2)
    return Subbands(
        ll=_analysis(row_lo, filters.phi, -1),
        lh=_analysis(row_hi, filters.phi, -1),
        hl=_analysis(row_lo, filters.psi, -1),
        hh=_analysis(row_hi, filters.psi, -1),
    )


def haar_bands(feature: torch.Tensor):
    """Parameter-free (low, high) pair: the LL subband and the summed detail magnitudes."""
    bands = dwt_reference(feature)
    return bands.ll, bands.lh.abs() + bands.hl.abs() + bands.hh.abs()


def _branch(channels: int) -> nn.Sequential:
    branch = nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(),
    )
    # He init keeps the band magnitude comparable to the input features
    for m in branch:
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return branch


class DomainToken(nn.Module):
    """Token ``t_k`` and its projection ``W2 relu(W1 t_k)``."""

    def __init__(self, channels: int, init_std: float = 0.02):
        super().__init__()
        if channels % 4:
            raise ValueError(f"channels must be divisible by 4, got {channels}")
        self.t = nn.Parameter(torch.randn(channels) * init_std)
        self.fc1 = nn.Linear(channels, channels // 4)
        self.fc2 = nn.Linear(channels // 4, channels)
        # scale-preserving weights and zero biases: the offset starts at the
        # token's own scale instead of being dominated by random biases
        nn.init.kaiming_normal_(self.fc1.weight, nonlinearity="relu")
        nn.init.normal_(self.fc2.weight, std=(channels // 4) ** -0.5)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(self.t)))


class SpectralDomainModulator(nn.Module):
    """Learnable band split, residual fusion and per-domain token offsets.

    ``wavelet=False`` keeps only the token bank, which is what test-time
    fusion needs when the frequency decomposition is ablated. Either band can
    be dropped independently with ``low_branch`` / ``high_branch``; with both
    dropped the wave stage is the identity.
    """

    def __init__(
        self,
        channels: int,
        num_domains: int,
        *,
        wavelet: bool = True,
        low_branch: bool = True,
        high_branch: bool = True,
        alpha_init: float = 0.1,
        token_std: float = 0.02,
    ):
        super().__init__()
        if num_domains < 1:
            raise ValueError("need at least one domain token")
        self.channels = channels
        self.num_domains = num_domains
        self.low = _branch(channels) if wavelet and low_branch else None
        self.high = _branch(channels) if wavelet and high_branch else None
        n_bands = int(self.low is not None) + int(self.high is not None)
        if n_bands:
            self.fuse = nn.Conv2d(n_bands * channels, channels, 1)
            self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))
        else:
            self.fuse = None
            self.alpha = None
        self.token = nn.ModuleList(DomainToken(channels, token_std) for _ in range(num_domains))

    @property
    def has_wavelet(self) -> bool:
        return self.fuse is not None

    def _check(self, feature: torch.Tensor) -> None:
        if feature.dim() != 4 or feature.shape[1] != self.channels:
            raise ValueError(
                f"expected features (B, {self.channels}, H, W), got {tuple(feature.shape)}"
            )

    def decompose(self, feature: torch.Tensor):
        """Return ``(low, high)``; a disabled branch yields ``None``."""
        self._check(feature)
        low = self.low(feature) if self.low is not None else None
        high = self.high(feature) if self.high is not None else None
        return low, high

    def fuse_wave(self, low, high, original: torch.Tensor) -> torch.Tensor:
        if self.fuse is None:
            return original
        parts = [b for b in (low, high) if b is not None]
        for b in parts:
            if b.shape != original.shape:
                raise ValueError(
                    f"band shape {tuple(b.shape)} does not match features {tuple(original.shape)}"
                )
        return self.fuse(torch.cat(parts, dim=1)) + self.alpha * original

    def wave(self, feature: torch.Tensor) -> torch.Tensor:
        low, high = self.decompose(feature)
        return self.fuse_wave(low, high, feature)

    def token_offsets(self) -> torch.Tensor:
        """All projected tokens, ``(K, C)``."""
        return torch.stack([tok() for tok in self.token])

    def modulate(self, f_wave: torch.Tensor, domain_id: Union[int, torch.Tensor]) -> torch.Tensor:
        ids = torch.as_tensor(domain_id, dtype=torch.long).reshape(-1)
        if ((ids < 0) | (ids >= self.num_domains)).any():
            raise ValueError(f"domain id out of range [0, {self.num_domains}): {ids.tolist()}")
        offsets = self.token_offsets()[ids]
        if offsets.shape[0] == 1:
            offsets = offsets.expand(f_wave.shape[0], -1)
        return f_wave + offsets[:, :, None, None].to(f_wave.dtype)

    def forward(self, feature: torch.Tensor, domain_id) -> torch.Tensor:
        return self.modulate(self.wave(feature), domain_id)


def learnable_decompose(feature: torch.Tensor, sdm: SpectralDomainModulator):
    return sdm.decompose(feature)


def fuse_wave(low, high, original, sdm: SpectralDomainModulator) -> torch.Tensor:
    return sdm.fuse_wave(low, high, original)


def modulate(f_wave: torch.Tensor, domain_id, sdm: SpectralDomainModulator) -> torch.Tensor:
    return sdm.modulate(f_wave, domain_id)


def sdm_forward(feature: torch.Tensor, domain_id, sdm: Optional[SpectralDomainModulator]):
    """Decompose, fuse, modulate. ``sdm=None`` is the disabled module (identity)."""
    if sdm is None:
        return feature
    return sdm(feature, domain_id)
