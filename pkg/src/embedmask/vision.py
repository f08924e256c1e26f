"""Convolutional vision backbone producing a dense patch-feature grid."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def patchify(pixels, p):
    """(B, H, W, C) -> (B, H/p, W/p, p*p*C), each patch flattened in (row, col, channel) order."""
    b, h, w, c = pixels.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    x = pixels.reshape(b, h // p, p, w // p, p, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // p, w // p, p * p * c)


class ResidualConvBlock(nn.Module):
    def __init__(self, dim, bias=True):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1, bias=bias)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1, bias=bias)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class VisionEncoder(nn.Module):
    """Stride-p patch stem followed by residual 3x3 conv blocks.

    The stem is a linear map on flattened patches, i.e. a p x p stride-p
    convolution, kept as ``nn.Linear`` so it can take a LoRA adapter.
    """

    def __init__(self, patch_size=8, d_vis=64, n_blocks=2, in_channels=3, bias=True):
        super().__init__()
        self.patch_size = patch_size
        self.d_vis = d_vis
        self.stem = nn.Linear(patch_size * patch_size * in_channels, d_vis, bias=bias)
        self.blocks = nn.ModuleList(ResidualConvBlock(d_vis, bias) for _ in range(n_blocks))

    def stem_features(self, pixels):
        return self.stem(patchify(pixels, self.patch_size))

    def forward(self, pixels):
        """(B, H, W, 3) in [0, 1] -> (B, H/p, W/p, d_vis)."""
        if pixels.dim() == 3:
            pixels = pixels.unsqueeze(0)
        x = self.stem_features(pixels).permute(0, 3, 1, 2)
        for block in self.blocks:
            x = block(x)
        return x.permute(0, 2, 3, 1)


def encode_image(image, encoder, dtype=torch.float32):
    """Features for a single :class:`~embedmask.datamodel.Image` as an (h, w, d_vis) tensor."""
    if image.height % encoder.patch_size or image.width % encoder.patch_size:
        raise ValueError(
            f"image {image.height}x{image.width} does not match patch size {encoder.patch_size}"
        )
    px = torch.tensor(np.array(image.pixels), dtype=dtype)
    return encoder(px.unsqueeze(0))[0]


class PatchProjector(nn.Linear):
    """Projects the feature grid to the LM width as a row-major token sequence."""

    def __init__(self, d_vis, d_model, bias=True):
        super().__init__(d_vis, d_model, bias=bias)

    def forward(self, grid):
        if grid.dim() == 3:
            grid = grid.unsqueeze(0)
        b, h, w, d = grid.shape
        return super().forward(grid.reshape(b, h * w, d))


def patch_embed_for_lm(features, projector):
    return projector(features)
