"""AutoBC with spatial attention: ResNet-style backbone, reconstruction and mask heads,
and a steering head on the attention-fused 256 x 56 x 56 features."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .common import ShapeError, check_image_batch


def spatial_fuse(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``mask * features + features`` with the mask broadcast over channels.

    A mask larger than the feature grid is average-pooled down to it first.
    Accepts single maps (C, H, W) / (1, H', W') or batches.
    """
    single = features.ndim == 3
    z = features.unsqueeze(0) if single else features
    m = mask.unsqueeze(0) if mask.ndim == 3 else mask
    if z.ndim != 4 or m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"bad shapes for fusion: features {tuple(features.shape)}, mask {tuple(mask.shape)}")
    if m.shape[-2:] != z.shape[-2:]:
        fh, fw = m.shape[-2] // z.shape[-2], m.shape[-1] // z.shape[-1]
        if fh < 1 or fh * z.shape[-2] != m.shape[-2] or fw * z.shape[-1] != m.shape[-1]:
            raise ShapeError(f"mask {tuple(mask.shape)} does not tile features {tuple(features.shape)}")
        m = F.avg_pool2d(m, (fh, fw))
    if m.shape[0] != z.shape[0]:
        raise ShapeError("feature and mask batch sizes differ")
    out = m * z + z
    return out.squeeze(0) if single else out


class BasicBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(y)) + x)


def _upsampling_head(c_in, width, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, width, 1),
        nn.ReLU(),
        nn.ConvTranspose2d(width, width, 2, stride=2),
        nn.ReLU(),
        nn.ConvTranspose2d(width, c_out, 2, stride=2),
        nn.Sigmoid(),
    )


class SpatialAttentionNet(nn.Module):
    """Stem and first ResNet-18 stage, widened by a 1x1 conv to ``feature_channels``."""

    def __init__(self, stem_width=64, blocks=2, feature_channels=256, head_width=32, image_size=224):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage = nn.Sequential(*[BasicBlock(stem_width) for _ in range(blocks)])
        self.expand = nn.Sequential(
            nn.Conv2d(stem_width, feature_channels, 1, bias=False),
            nn.BatchNorm2d(feature_channels),
            nn.ReLU(),
        )
        self.recon_head = _upsampling_head(feature_channels, head_width, 3)
        self.mask_head = _upsampling_head(feature_channels, head_width, 1)
        side = image_size // 4
        n_flat = feature_channels * side * side
        self.steer = nn.Linear(n_flat, 1)
        # ~800k inputs: without the fixed rescale one Adam step moves the
        # output by lr * sum|z|, which overshoots any sane steering range.
        self.flat_scale = 1.0 / math.sqrt(n_flat)

    def features(self, x):
        check_image_batch(x)
        return self.expand(self.stage(self.stem(x)))

    def steer_from_features(self, z, mask=None):
        fused = z if mask is None else spatial_fuse(z, mask)
        return self.steer(fused.flatten(1) * self.flat_scale).squeeze(-1)

    def forward(self, x):
        z = self.features(x)
        mask = self.mask_head(z)
        steering = self.steer_from_features(z, mask)
        if self.training:
            return steering, mask, self.recon_head(z)
        return steering, mask
