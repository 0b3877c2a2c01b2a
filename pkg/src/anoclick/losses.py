"""Training losses for dense mask prediction."""
from __future__ import annotations

import torch


def normalized_focal_loss(prediction: torch.Tensor, target: torch.Tensor,
                          gamma: float = 2.0, eps: float = 1e-7) -> torch.Tensor:
    """Focal loss whose per-pixel weights are normalized to sum to one.

    ``prediction`` holds probabilities in [0, 1]; ``target`` the binary
    mask. Each pixel contributes -log(p_t) weighted by (1 - p_t)^gamma
    divided by the batch-sum of those weights, so gamma = 0 reduces to
    the mean binary cross entropy.
    """
    if prediction.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = prediction.clamp(eps, 1.0 - eps)
    t = target.to(p.dtype)
    p_t = torch.where(t > 0.5, p, 1.0 - p)
    weights = (1.0 - p_t) ** gamma
    weights = weights / weights.sum()
    return (weights * -torch.log(p_t)).sum()


def focal_weights(prediction: torch.Tensor, target: torch.Tensor,
                  gamma: float = 2.0, eps: float = 1e-7) -> torch.Tensor:
    """The normalized per-pixel weights used by ``normalized_focal_loss``."""
    p = prediction.clamp(eps, 1.0 - eps)
    t = target.to(p.dtype)
    p_t = torch.where(t > 0.5, p, 1.0 - p)
    weights = (1.0 - p_t) ** gamma
    return weights / weights.sum()
