from __future__ import annotations

import torch


class ShapeError(ValueError):
    pass


def check_image_batch(x: torch.Tensor, size: int = 224) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(f"expected (B, 3, {size}, {size}) images, got {tuple(x.shape)}")


def as_batch(x, dtype=None) -> tuple[torch.Tensor, bool]:
    """Tensor view of one image or a batch; also reports whether a batch axis was added."""
    t = torch.as_tensor(x)
    if dtype is not None:
        t = t.to(dtype)
    if t.ndim == 3:
        return t.unsqueeze(0), True
    return t, False
