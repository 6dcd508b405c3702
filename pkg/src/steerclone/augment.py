"""Seeded on-the-fly augmentation and batching.

Images travel as uint8 (N, H, W, 3) arrays until ``normalize_image`` maps
them to float32 (N, 3, H, W) in [-0.5, 0.5].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .datasetio import as_frames


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    shift_prob: float = 0.5
    darken_prob: float = 0.5
    max_shift: float = 0.2
    darken_area: tuple[float, float] = (0.1, 0.5)
    darken_factor: float = 0.5


def hflip_pair(image: np.ndarray, steering: float, rng: np.random.Generator | None = None, *, force: bool | None = None):
    """Mirror an HWC (or CHW float) image left-right with probability 0.5 and negate the steering."""
    flip = force if force is not None else bool(rng.random() < 0.5)
    if not flip:
        return image, steering
    return np.ascontiguousarray(image[..., ::-1, :] if _is_hwc(image) else image[..., ::-1]), -steering


def _is_hwc(image: np.ndarray) -> bool:
    return image.ndim == 3 and image.shape[-1] in (1, 3) and image.shape[0] not in (1, 3)


def vshift(image: np.ndarray, rng: np.random.Generator | None = None, *, offset: int | None = None, max_frac: float = 0.2):
    """Translate rows by a uniform offset in [-max_frac*H, max_frac*H]; edge rows fill the gap."""
    hwc = _is_hwc(image)
    h = image.shape[0] if hwc else image.shape[-2]
    if offset is None:
        limit = int(math.floor(max_frac * h))
        offset = int(rng.integers(-limit, limit + 1))
    src = np.clip(np.arange(h) - offset, 0, h - 1)
    return image[src] if hwc else image[..., src, :]


def darken_region(
    image: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    region: tuple[int, int, int, int] | None = None,
    area: tuple[float, float] = (0.1, 0.5),
    factor: float = 0.5,
):
    """Multiply an axis-aligned rectangle (row0, row1, col0, col1) by ``factor``.

    When no region is given one is drawn covering ``area`` of the image;
    degenerate draws are re-sampled.
    """
    hwc = _is_hwc(image)
    h, w = (image.shape[0], image.shape[1]) if hwc else image.shape[-2:]
    if region is None:
        region = sample_region(h, w, rng, area)
    r0, r1, c0, c1 = region
    out = image.astype(np.float32) if image.dtype == np.uint8 else image.copy()
    if hwc:
        out[r0:r1, c0:c1] *= factor
    else:
        out[..., r0:r1, c0:c1] *= factor
    if image.dtype == np.uint8:
        out = np.floor(out).astype(np.uint8)
    return out


def sample_region(h: int, w: int, rng: np.random.Generator, area=(0.1, 0.5)) -> tuple[int, int, int, int]:
    while True:
        frac = rng.uniform(*area)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        rh = int(round(math.sqrt(frac * h * w * aspect)))
        rw = int(round(frac * h * w / max(rh, 1)))
        if 0 < rh <= h and 0 < rw <= w and area[0] <= rh * rw / (h * w) <= area[1]:
            break
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    return r0, r0 + rh, c0, c0 + rw


def normalize_image(image_u8: np.ndarray) -> np.ndarray:
    """uint8 HWC / NHWC -> float32 CHW / NCHW with v/255 - 0.5."""
    x = np.asarray(image_u8)
    x = x.astype(np.float32) / np.float32(255.0) - np.float32(0.5)
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def augment_one(image: np.ndarray, steering: float, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """flip -> shift -> darken, each applied independently; returns (image, steering, flipped)."""
    flipped = bool(rng.random() < cfg.flip_prob)
    if flipped:
        image, steering = hflip_pair(image, steering, force=True)
    if rng.random() < cfg.shift_prob:
        image = vshift(image, rng, max_frac=cfg.max_shift)
    if rng.random() < cfg.darken_prob:
        image = darken_region(image, rng, area=cfg.darken_area, factor=cfg.darken_factor)
    return image, steering, flipped


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


def iterate_batches(
    data,
    batch_size: int,
    *,
    enabled: bool = False,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    with_masks: bool = False,
    cfg: AugmentConfig = AugmentConfig(),
) -> Iterator[tuple]:
    """One epoch of (images, steering[, masks]) batches.

    Batch membership is reshuffled every epoch from ``(seed, epoch)``; rows
    inside a batch stay in dataset order. Masks, when requested, follow the
    horizontal flip and are otherwise left untouched.
    """
    frames = as_frames(data)
    n = len(frames)
    if n == 0:
        raise ValueError("cannot iterate an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if with_masks and frames.masks is None:
        raise ValueError("dataset has no lane masks")
    ss = epoch_seed(seed, epoch)
    order_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    order = order_rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = np.sort(order[start:start + batch_size]) if shuffle else order[start:start + batch_size]
        imgs = frames.images[idx]
        steer = frames.steering[idx].astype(np.float32)
        masks = frames.masks[idx] if with_masks else None
        if enabled:
            imgs = imgs.copy()
            if with_masks:
                masks = masks.copy()
            for b in range(len(idx)):
                imgs[b], steer[b], flipped = augment_one(imgs[b], float(steer[b]), aug_rng, cfg)
                if with_masks and flipped:
                    masks[b] = masks[b][:, ::-1]
        batch = (normalize_image(imgs), steer)
        if with_masks:
            batch += (masks.astype(np.float32)[:, None] / np.float32(255.0),)
        yield batch


def augment_stream(data, batch_size: int, enabled: bool = False, seed: int = 0, epochs: int | None = None):
    """Endless (or ``epochs``-long) stream of augmented, normalised batches."""
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from iterate_batches(data, batch_size, enabled=enabled, seed=seed, epoch=epoch)
        epoch += 1


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
