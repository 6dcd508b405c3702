from __future__ import annotations

import torch
import torch.nn.functional as F

from .common import ShapeError


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ae_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel value."""
    _same_shape(x, x_hat)
    return ((x - x_hat) ** 2).mean()


def sit_recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-image L1 norm of the residual, averaged over the batch."""
    _same_shape(x, x_hat)
    return (x - x_hat).abs().reshape(x.shape[0], -1).sum(dim=1).mean()


def steering_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return ((pred - target) ** 2).mean()


def spatial_loss(steer, mask, recon, target_steer, target_mask, target_image, mask_weight=1.0, recon_weight=1.0):
    """Steering MSE plus weighted mask BCE and reconstruction MSE."""
    loss = steering_loss(steer, target_steer)
    if mask_weight:
        loss = loss + mask_weight * F.binary_cross_entropy(mask, target_mask)
    if recon_weight:
        loss = loss + recon_weight * ae_loss(target_image, recon)
    return loss
