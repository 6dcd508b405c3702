"""Vision transformer steering model with grouped-mask reconstruction pretraining."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .common import ShapeError

PATCH = 16


def patchify(images: torch.Tensor, patch: int = PATCH) -> torch.Tensor:
    """(B, C, H, W) -> (B, (H/p)*(W/p), C*p*p), grid in row-major order,
    each token flattened channel-major like a conv kernel."""
    B, C, H, W = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image size {H}x{W} is not a multiple of {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * patch * patch)


def unpatchify(tokens: torch.Tensor, channels: int = 3, patch: int = PATCH) -> torch.Tensor:
    B, N, _ = tokens.shape
    g = math.isqrt(N)
    if g * g != N:
        raise ShapeError(f"{N} tokens do not form a square grid")
    x = tokens.reshape(B, g, g, channels, patch, patch)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(B, channels, g * patch, g * patch)


def group_mask_indicator(grid: int, mask_ratio: float, rng: np.random.Generator, max_side: int = 4) -> np.ndarray:
    """Boolean (grid*grid,) indicator built from random rectangles of adjacent patches.

    Each rectangle covers at least two patches and at most ``max_side**2``,
    so the masked share overshoots ``mask_ratio`` by under one rectangle.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must be in (0, 1)")
    target = math.ceil(mask_ratio * grid * grid)
    m = np.zeros((grid, grid), dtype=bool)
    while m.sum() < target:
        h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
        if h * w < 2:
            continue
        r, c = int(rng.integers(0, grid - h + 1)), int(rng.integers(0, grid - w + 1))
        m[r:r + h, c:c + w] = True
    return m.ravel()


def group_mask(tokens: torch.Tensor, mask_ratio: float, rng: np.random.Generator, mask_token: torch.Tensor):
    """Replace grouped patches of every sample with ``mask_token``.

    Returns (corrupted tokens, bool indicator of shape (B, N)).
    """
    B, N, D = tokens.shape
    grid = math.isqrt(N)
    ind = np.stack([group_mask_indicator(grid, mask_ratio, rng) for _ in range(B)])
    ind_t = torch.from_numpy(ind).to(tokens.device)
    corrupted = torch.where(ind_t[..., None], mask_token.to(tokens.dtype).expand(B, N, D), tokens)
    return corrupted, ind_t


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ReconstructionHead(nn.Module):
    """Token MLP, then a stride-16 transposed conv back to pixels."""

    def __init__(self, dim, patch=PATCH):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.up = nn.ConvTranspose2d(dim, 3, patch, stride=patch)

    def forward(self, tokens):
        B, N, D = tokens.shape
        g = math.isqrt(N)
        x = self.mlp(tokens).transpose(1, 2).reshape(B, D, g, g)
        return torch.sigmoid(self.up(x))


class ViTNet(nn.Module):
    def __init__(
        self,
        width=384,
        depth=6,
        heads=6,
        mlp_ratio=4.0,
        embed_dim=1000,
        head_variant="mlp",
        head_hidden=256,
        image_size=224,
        patch=PATCH,
        with_reconstruction=False,
    ):
        super().__init__()
        if head_variant not in ("mlp", "linear"):
            raise ValueError(f"head_variant must be 'mlp' or 'linear', got {head_variant!r}")
        self.patch = patch
        self.image_size = image_size
        n_tokens = (image_size // patch) ** 2
        self.patch_embed = nn.Linear(3 * patch * patch, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, width))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        self.blocks = nn.ModuleList([Block(width, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.embed = nn.Linear(width, embed_dim)
        if head_variant == "mlp":
            self.head = nn.Sequential(nn.Linear(embed_dim, head_hidden), nn.GELU(), nn.Linear(head_hidden, 1))
        else:
            self.head = nn.Linear(embed_dim, 1)
        self.recon_head = ReconstructionHead(width, patch) if with_reconstruction else None
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def tokens(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        return self.patch_embed(patchify(images, self.patch))

    def encode(self, tok):
        x = tok + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def embedding(self, images):
        """(B, embed_dim) global image descriptor."""
        return self.embed(self.encode(self.tokens(images)).mean(dim=1))

    def forward(self, images):
        return self.head(self.embedding(images)).squeeze(-1)

    def reconstruct(self, images, mask_ratio, rng):
        """Masked reconstruction for pretraining: returns (reconstruction, indicator)."""
        if self.recon_head is None:
            raise RuntimeError("model was built without a reconstruction head")
        corrupted, ind = group_mask(self.tokens(images), mask_ratio, rng, self.mask_token)
        return self.recon_head(self.encode(corrupted)), ind
