"""Seg-embedding projection and a small prompt-conditioned mask decoder.

The decoder keeps the topology of the Segment Anything mask decoder at toy
size: a learned mask token and the prompt token attend to the image grid
through two-way attention blocks, the grid is upscaled by stride-2
transposed convolutions back to full resolution, and the mask token (after a
hypernetwork MLP) is dotted with every upscaled pixel embedding.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import BinaryMask


class NonFiniteInputError(ValueError):
    pass


class Projection(nn.Module):
    """Two linear layers with a ReLU between them: d_model -> d_hidden -> d_prompt."""

    def __init__(self, d_in=128, d_hidden=256, d_out=64):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    @property
    def widths(self):
        return (self.fc1.in_features, self.fc1.out_features, self.fc2.out_features)

    def forward(self, x):
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"projection expects width {self.fc1.in_features}, got {x.shape[-1]}")
        return self.fc2(F.relu(self.fc1(x)))


def project(raw, gamma):
    return gamma(raw)


class MLP(nn.Module):
    def __init__(self, d_in, d_hidden, d_out, n_layers):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Attention(nn.Module):
    def __init__(self, dim, n_heads, downsample=1):
        super().__init__()
        inner = dim // downsample
        if inner % n_heads:
            raise ValueError(f"attention width {inner} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)

    def forward(self, q, k, v):
        b = q.shape[0]
        h = self.n_heads

        def heads(z):
            return z.view(b, z.shape[1], h, -1).transpose(1, 2)

        qh, kh, vh = heads(self.q(q)), heads(self.k(k)), heads(self.v(v))
        att = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1]), dim=-1)
        y = (att @ vh).transpose(1, 2).reshape(b, q.shape[1], -1)
        return self.out(y)


class TwoWayBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_dim, skip_first_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, n_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, n_heads, downsample=2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, n_heads, downsample=2)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MaskDecoder(nn.Module):
    def __init__(self, d_vis=64, d_prompt=64, grid=(8, 8), patch_size=8, depth=2, n_heads=4, mlp_dim=128):
        super().__init__()
        n_up = int(round(math.log2(patch_size)))
        if 2 ** n_up != patch_size:
            raise ValueError(f"patch size {patch_size} must be a power of two")
        self.grid = tuple(grid)
        self.patch_size = patch_size
        self.d_prompt = d_prompt
        self.feat_proj = nn.Linear(d_vis, d_prompt)
        self.image_pe = nn.Parameter(torch.randn(grid[0] * grid[1], d_prompt) * 0.1)
        self.mask_token = nn.Parameter(torch.randn(1, d_prompt) * 0.1)
        self.blocks = nn.ModuleList(
            TwoWayBlock(d_prompt, n_heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth)
        )
        self.final_attn = Attention(d_prompt, n_heads, downsample=2)
        self.norm_final = nn.LayerNorm(d_prompt)
        chans = [d_prompt] + [max(d_prompt // 2 ** (i + 1), 8) for i in range(n_up)]
        ups = []
        for i in range(n_up):
            ups.append(nn.ConvTranspose2d(chans[i], chans[i + 1], kernel_size=2, stride=2))
            if i < n_up - 1:
                ups += [LayerNorm2d(chans[i + 1]), nn.GELU()]
            else:
                ups.append(nn.GELU())
        self.upscale = nn.Sequential(*ups)
        self.hyper = MLP(d_prompt, d_prompt, chans[-1], 3)

    def forward(self, h_seg, features):
        """h_seg (N, d_prompt), features (N, h, w, d_vis) -> mask logits (N, h*p, w*p)."""
        if h_seg.dim() == 1:
            h_seg = h_seg.unsqueeze(0)
        if features.dim() == 3:
            features = features.unsqueeze(0).expand(h_seg.shape[0], -1, -1, -1)
        n, gh, gw, _ = features.shape
        if (gh, gw) != self.grid:
            raise ValueError(f"feature grid {(gh, gw)} does not match decoder grid {self.grid}")
        if h_seg.shape[0] != n:
            raise ValueError(f"{h_seg.shape[0]} prompts for {n} feature grids")
        if not (torch.isfinite(h_seg).all() and torch.isfinite(features).all()):
            raise NonFiniteInputError("non-finite input to mask decoder")
        keys = self.feat_proj(features.reshape(n, gh * gw, -1))
        key_pe = self.image_pe.unsqueeze(0).expand(n, -1, -1)
        tokens = torch.cat([self.mask_token.unsqueeze(0).expand(n, -1, -1), h_seg.unsqueeze(1)], dim=1)
        queries = tokens
        for block in self.blocks:
            queries, keys = block(queries, keys, tokens, key_pe)
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))
        grid = keys.transpose(1, 2).reshape(n, self.d_prompt, gh, gw)
        up = self.upscale(grid)  # (n, c, H, W)
        w = self.hyper(queries[:, 0])  # (n, c)
        return torch.einsum("nc,nchw->nhw", w, up)


def decode_mask(h_seg, features, decoder):
    return decoder(h_seg, features)


def binarize(logits, threshold=0.0):
    values = logits.detach().cpu().numpy() if torch.is_tensor(logits) else np.asarray(logits)
    return BinaryMask((values > threshold).astype(np.uint8))
