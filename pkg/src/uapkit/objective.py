"""Attack objectives: per-sample cross entropy, its log-scaled mean, and the
negated form minimized during perturbation training."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor


def _check_pair(logits: Tensor, labels: Tensor) -> None:
    if logits.ndim != 2:
        raise ValueError(f"logits must have shape (n, num_classes), got {tuple(logits.shape)}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"labels must have shape ({logits.shape[0]},), got {tuple(labels.shape)}"
        )
    if labels.numel() == 0:
        raise ValueError("empty batch")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    if labels.min().item() < 0 or labels.max().item() >= logits.shape[1]:
        raise ValueError("label out of range for logits width")


def cross_entropy_per_sample(logits: Tensor, labels: Tensor) -> Tensor:
    """Unreduced softmax cross entropy, one nonnegative value per sample."""
    _check_pair(logits, labels)
    return F.cross_entropy(logits, labels.long(), reduction="none")


def scaled_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean of log(1 + ce_i): compresses large per-sample losses so a few
    already-fooled samples cannot dominate the batch gradient."""
    return torch.log1p(cross_entropy_per_sample(logits, labels)).mean()


def adversarial_loss(adv_logits: Tensor, clean_labels: Tensor) -> Tensor:
    """Negated scaled cross entropy against the clean-image predictions.

    Minimizing this pushes perturbed predictions away from what the target
    model said on unperturbed inputs, so no ground-truth labels are needed.
    """
    return -scaled_cross_entropy(adv_logits, clean_labels)
