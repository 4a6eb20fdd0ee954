"""Transformer backbone over the network-token grid and the shared projection head."""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    """Fixed (n_positions, dim) sin/cos table: sin on even, cos on odd channels."""
    pos = torch.arange(n_positions, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.float()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        y = self.out(y)
        return (y, attn) if return_weights else y


class Block(nn.Module):
    """Pre-norm transformer block with layer scale on both residual branches."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, layer_scale_init: float = 0.1):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.layer_scale_init = layer_scale_init
        self.gamma1 = nn.Parameter(torch.full((dim,), layer_scale_init))
        self.gamma2 = nn.Parameter(torch.full((dim,), layer_scale_init))

    @torch.no_grad()
    def reset_layer_scale(self) -> None:
        """Refill gains with the init value in the current dtype (0.1 is inexact in float32)."""
        self.gamma1.fill_(self.layer_scale_init)
        self.gamma2.fill_(self.layer_scale_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.gamma1 * self.attn(self.norm1(x))
        return x + self.gamma2 * self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Backbone f: assembles the token sequence and runs the transformer.

    Grid rows are networks for the semantic tokenizer (or ROIs for the
    per-ROI ablation); columns are temporal patches.
    """

    def __init__(
        self,
        n_rows: int,
        n_patches: int,
        dim: int,
        depth: int = 8,
        heads: int = 8,
        mlp_ratio: float = 4.0,
        layer_scale_init: float = 0.1,
    ):
        super().__init__()
        self.n_rows = n_rows
        self.n_patches = n_patches
        self.dim = dim
        self.cls_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.row_embed = nn.Parameter(torch.randn(n_rows, dim) * 0.02)
        self.register_buffer("pos_embed", sinusoidal_table(n_patches, dim))
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_ratio, layer_scale_init) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def assemble(self, tokens: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, G, P, D) tokens and optional (B, G, P) bool mask -> (B, G*P + 1, D)."""
        b, g, p, d = tokens.shape
        if (g, p, d) != (self.n_rows, self.n_patches, self.dim):
            raise ValueError(f"token grid {(g, p, d)} does not match encoder {(self.n_rows, self.n_patches, self.dim)}")
        if mask is not None:
            if mask.shape != (b, g, p):
                raise ValueError(f"mask shape {tuple(mask.shape)} does not match grid {(b, g, p)}")
            tokens = torch.where(mask[..., None], self.mask_token.to(tokens.dtype), tokens)
        x = tokens + self.pos_embed.to(tokens.dtype)[None, None] + self.row_embed[None, :, None]
        cls = self.cls_token.expand(b, 1, d)
        return torch.cat([cls, x.reshape(b, g * p, d)], dim=1)

    def encode(self, seq: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = seq
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after encoder layer {i}")
        x = self.norm(x)
        b = x.shape[0]
        return x[:, 0], x[:, 1:].reshape(b, self.n_rows, self.n_patches, self.dim)

    def forward(self, tokens: torch.Tensor, mask: Optional[torch.Tensor] = None):
        return self.encode(self.assemble(tokens, mask))

    def attention_maps(self, seq: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        x = seq
        for blk in self.blocks:
            _, w = blk.attn(blk.norm1(x), return_weights=True)
            maps.append(w)
            x = blk(x)
        return maps


class ProjectionHead(nn.Module):
    """Shared MLP head h; every output vector is L2-normalised."""

    def __init__(self, dim: int, hidden: int = 1024, out_dim: int = 128, n_hidden: int = 2):
        super().__init__()
        layers: List[nn.Module] = []
        width = dim
        for _ in range(n_hidden):
            layers += [nn.Linear(width, hidden), nn.GELU()]
            width = hidden
        layers.append(nn.Linear(width, out_dim))
        self.mlp = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.mlp(x)
        norm = z.norm(dim=-1, keepdim=True)
        if (norm == 0).any():
            raise FloatingPointError("projection produced a zero vector; cannot L2-normalise")
        return z / norm
