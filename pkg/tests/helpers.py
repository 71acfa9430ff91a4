"""Shared test utilities: a central-difference gradient checker and tiny configs."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional

import torch


def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index, h: float = 1e-4) -> float:
    """(f(x + h) - f(x - h)) / 2h for one entry of ``tensor``, in place and restored."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        plus = fn().item()
        tensor[index] = orig - h
        minus = fn().item()
        tensor[index] = orig
    return (plus - minus) / (2 * h)


def gradient_errors(
    fn: Callable[[], torch.Tensor],
    params: Dict[str, torch.Tensor],
    h: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Norm-wise relative error between autograd and central differences per tensor.

    ``max_entries`` caps the checked entries per tensor (sampled without
    replacement); ``None`` checks every entry.
    """
    for p in params.values():
        p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, list(params.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        flat = torch.arange(p.numel())
        if max_entries is not None and p.numel() > max_entries:
            flat = flat[torch.randperm(p.numel(), generator=gen)[:max_entries]]
        analytic, numeric = [], []
        for i in flat.tolist():
            idx = torch.unravel_index(torch.tensor(i), p.shape)
            idx = tuple(int(j) for j in idx)
            analytic.append(g[idx].item())
            numeric.append(central_difference(fn, p.data, idx, h))
        a = torch.tensor(analytic, dtype=torch.float64)
        n = torch.tensor(numeric, dtype=torch.float64)
        scale = max(a.norm().item(), n.norm().item(), 1e-8)
        errors[name] = (a - n).norm().item() / scale
    return errors


def named(module: torch.nn.Module, prefix: str = "") -> Dict[str, torch.Tensor]:
    return {prefix + n: p for n, p in module.named_parameters()}


def max_error(errors: Dict[str, float]) -> float:
    return max(errors.values()) if errors else 0.0
