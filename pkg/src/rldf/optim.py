"""Gradient extraction, global-norm clipping and optimizer construction."""

from __future__ import annotations

import math

import torch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def grad(loss: torch.Tensor, params) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` keyed like ``named_parameters``."""
    named = list(params)
    gs = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, gs)}


def global_norm(grads) -> float:
    vals = grads.values() if isinstance(grads, dict) else grads
    return math.sqrt(sum(float((g * g).sum()) for g in vals if g is not None))


def clip_grad_norm(grads, max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place by ``max_norm / norm`` when ``norm > max_norm``.

    Returns ``(norm before clipping, finite)``.  Non-finite gradients are left
    untouched and reported with ``finite=False`` so the caller can skip.
    """
    vals = [g for g in (grads.values() if isinstance(grads, dict) else grads) if g is not None]
    norm = global_norm(vals)
    if not math.isfinite(norm):
        return norm, False
    if norm > max_norm:
        scale = max_norm / norm
        for g in vals:
            g.mul_(scale)
    return norm, True


def make_optimizer(params, name: str = "adam", lr: float = 1e-3) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def apply_gradients(optimizer: torch.optim.Optimizer, named_params, grads: dict) -> None:
    for n, p in named_params:
        p.grad = grads[n]
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
