"""Noise normalization and the warp-then-add adversarial composition."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .flowwarp import bilinear_warp

# Below this max-abs value a raw noise tensor cannot be rescaled to a target
# sup-norm without numerical blow-up and is treated as degenerate (zero noise).
DEGENERATE_NOISE_NORM = 1e-12


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation budget: sup-norm bound for noise, smoothness bound for flow."""

    epsilon: float
    tau: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.tau < 0.0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


def scale_noise(raw_noise: Tensor, epsilon: float) -> Tensor:
    """Rescale a raw noise tensor so its max absolute value equals ``epsilon``.

    ``epsilon == 0`` or a degenerate (near-zero) raw tensor yields all zeros.
    Differentiable with respect to ``raw_noise`` in the regular case.
    """
    if raw_noise.ndim != 3:
        raise ValueError(f"noise must have shape (c, h, w), got {tuple(raw_noise.shape)}")
    if not torch.isfinite(raw_noise).all():
        raise ValueError("noise contains non-finite values")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0.0:
        return torch.zeros_like(raw_noise)
    norm = raw_noise.abs().max()
    if norm.item() <= DEGENERATE_NOISE_NORM:
        return torch.zeros_like(raw_noise)
    return raw_noise * (epsilon / norm)


def compose_adversarial(images: Tensor, flow: Tensor, noise: Tensor) -> Tensor:
    """Apply the universal perturbation: warp by ``flow``, add ``noise``, clip to [0, 1].

    The flow is applied first so the additive noise lands on the already
    deformed image. With zero flow and zero noise the output equals the
    clipped input exactly (bit-for-bit for inputs already in [0, 1]).
    """
    if images.ndim != 4:
        raise ValueError(f"images must have shape (n, c, h, w), got {tuple(images.shape)}")
    if noise.shape != images.shape[1:]:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} does not match image shape {tuple(images.shape[1:])}"
        )
    warped = bilinear_warp(images, flow)
    return (warped + noise).clamp(0.0, 1.0)
