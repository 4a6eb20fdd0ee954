"""Semantic tokenizer: one convolutional module per functional network.

Each module slices its ROIs' signals into patches, runs a dense short-kernel
branch and a depthwise structured-kernel branch on every patch, projects both
to D/2, then applies GELU, average pooling over time and LayerNorm.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import AtlasMapping


def structured_kernel_length(base_len: int = 4, scales: int = 3) -> int:
    return base_len * 2 ** (scales - 1)


def structured_kernel_template(params: torch.Tensor, base_len: int = 4, scales: int = 3) -> torch.Tensor:
    """Build multi-scale kernels from ``base_len * scales`` free parameters.

    Scale ``i`` contributes ``base_len`` parameters, nearest-neighbour upsampled
    by ``2 ** max(0, i - 1)`` and weighted by ``2 ** (scales - 1 - i)``. With the
    defaults this concatenates 4 taps x 4.0, 4 taps x 2.0 and 8 taps x 1.0.
    """
    if params.shape[-1] != base_len * scales:
        raise ValueError(f"expected {base_len * scales} parameters per kernel, got {params.shape[-1]}")
    pieces = []
    for i in range(scales):
        seg = params[..., i * base_len : (i + 1) * base_len]
        factor = 2 ** max(0, i - 1)
        if factor > 1:
            seg = seg.repeat_interleave(factor, dim=-1)
        pieces.append(seg * float(2 ** (scales - 1 - i)))
    return torch.cat(pieces, dim=-1)


def expansion_heads(n_rois: int, dim: int) -> int:
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    return math.ceil((dim // 2) / n_rois)


class NetworkTokenizer(nn.Module):
    """Tokenizer module for a single network of ``n_rois`` ROIs."""

    def __init__(
        self,
        n_rois: int,
        dim: int,
        patch_len: int,
        std_kernel: int = 3,
        base_len: int = 4,
        scales: int = 3,
        feedthrough_init: float = 0.5,
        structured_init_std: float = 0.02,
    ):
        super().__init__()
        if std_kernel % 2 == 0:
            raise ValueError(f"standard-branch kernel must be odd for 'same' padding, got {std_kernel}")
        self.n_rois = n_rois
        self.dim = dim
        self.patch_len = patch_len
        self.heads = expansion_heads(n_rois, dim)
        self.base_len = base_len
        self.scales = scales
        channels = self.heads * n_rois

        self.conv_std = nn.Conv1d(n_rois, channels, std_kernel, padding=std_kernel // 2)
        self.str_params = nn.Parameter(torch.randn(channels, 1, base_len * scales) * structured_init_std)
        self.str_bias = nn.Parameter(torch.zeros(channels))
        # one feedthrough coefficient per expanded channel, shared by both branches
        self.feedthrough = nn.Parameter(torch.full((channels,), feedthrough_init))
        self.proj_std = nn.Linear(channels, dim // 2)
        self.proj_str = nn.Linear(channels, dim // 2)
        self.norm = nn.LayerNorm(dim, eps=1e-6)

    def structured_kernel(self) -> torch.Tensor:
        return structured_kernel_template(self.str_params, self.base_len, self.scales)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C_n, T) -> (B, P, D)."""
        b, c, t = x.shape
        if c != self.n_rois:
            raise ValueError(f"expected {self.n_rois} ROIs, got {c}")
        if t % self.patch_len:
            raise ValueError(f"T={t} is not divisible by patch length {self.patch_len}")
        p = t // self.patch_len
        xp = x.reshape(b, c, p, self.patch_len).transpose(1, 2).reshape(b * p, c, self.patch_len)
        # expanded channel j reads ROI j // heads (grouped-conv layout)
        rep = xp.repeat_interleave(self.heads, dim=1)

        skip = self.feedthrough[:, None] * rep
        h_std = self.conv_std(xp) + skip
        k = self.structured_kernel()
        left = (k.shape[-1] - 1) // 2
        padded = F.pad(xp, (left, k.shape[-1] - 1 - left))
        h_str = F.conv1d(padded, k, self.str_bias, groups=c)
        h_str = h_str + skip

        h = torch.cat([self.proj_std(h_std.transpose(1, 2)), self.proj_str(h_str.transpose(1, 2))], dim=-1)
        h = F.gelu(h).mean(dim=1)
        return self.norm(h).reshape(b, p, self.dim)


class SemanticTokenizer(nn.Module):
    """Maps (B, C, T_crop) to network tokens (B, N, P, D)."""

    def __init__(
        self,
        atlas: AtlasMapping,
        dim: int,
        patch_len: int,
        std_kernel: int = 3,
        base_len: int = 4,
        scales: int = 3,
        feedthrough_init: float = 0.5,
        structured_init_std: float = 0.02,
    ):
        super().__init__()
        self.n_rois = atlas.n_rois
        self.dim = dim
        self.patch_len = patch_len
        self.networks = nn.ModuleList()
        for n in range(atlas.n_networks):
            members = atlas.members(n)
            self.register_buffer(f"members_{n}", torch.as_tensor(members, dtype=torch.long), persistent=False)
            self.networks.append(
                NetworkTokenizer(len(members), dim, patch_len, std_kernel, base_len, scales,
                                 feedthrough_init, structured_init_std)
            )
        self.row_network = np.arange(atlas.n_networks)

    @property
    def n_rows(self) -> int:
        return len(self.networks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.n_rois:
            raise ValueError(f"expected {self.n_rois} ROIs, got {x.shape[1]}")
        tokens = [g(x.index_select(1, getattr(self, f"members_{n}"))) for n, g in enumerate(self.networks)]
        return torch.stack(tokens, dim=1)


class ROILinearTokenizer(nn.Module):
    """Ablation tokenizer: one shared linear map per ROI patch, giving (B, C, P, D)."""

    def __init__(self, atlas: AtlasMapping, dim: int, patch_len: int):
        super().__init__()
        self.n_rois = atlas.n_rois
        self.dim = dim
        self.patch_len = patch_len
        self.proj = nn.Linear(patch_len, dim)
        self.row_network = np.asarray(atlas.roi_network)

    @property
    def n_rows(self) -> int:
        return self.n_rois

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t = x.shape
        if c != self.n_rois:
            raise ValueError(f"expected {self.n_rois} ROIs, got {c}")
        if t % self.patch_len:
            raise ValueError(f"T={t} is not divisible by patch length {self.patch_len}")
        return self.proj(x.reshape(b, c, t // self.patch_len, self.patch_len))


def build_tokenizer(kind: str, atlas: AtlasMapping, dim: int, patch_len: int, **kwargs) -> nn.Module:
    if kind == "semantic":
        return SemanticTokenizer(atlas, dim, patch_len, **kwargs)
    if kind == "roi_linear":
        return ROILinearTokenizer(atlas, dim, patch_len)
    raise ValueError(f"unknown tokenizer kind {kind!r}")
