from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .dataset import AtlasMapping
from .encoder import Encoder, ProjectionHead
from .tokenizer import build_tokenizer


class BrainSemantoks(nn.Module):
    """Tokenizer G, backbone f and projector h for one parameter set (student or teacher)."""

    def __init__(
        self,
        atlas: AtlasMapping,
        t_crop: int,
        dim: int = 768,
        patch_len: int = 20,
        tokenizer_kind: str = "semantic",
        depth: int = 8,
        heads: int = 8,
        mlp_ratio: float = 4.0,
        layer_scale_init: float = 0.1,
        head_hidden: int = 1024,
        head_layers: int = 2,
        d_proj: int = 128,
        tokenizer_kwargs: Optional[dict] = None,
    ):
        super().__init__()
        if t_crop % patch_len:
            raise ValueError(f"T_crop={t_crop} must be divisible by patch length {patch_len}")
        self.atlas = atlas
        self.t_crop = t_crop
        self.patch_len = patch_len
        self.n_patches = t_crop // patch_len
        self.tokenizer = build_tokenizer(tokenizer_kind, atlas, dim, patch_len, **(tokenizer_kwargs or {}))
        self.encoder = Encoder(self.tokenizer.n_rows, self.n_patches, dim, depth, heads, mlp_ratio, layer_scale_init)
        self.head = ProjectionHead(dim, head_hidden, d_proj, head_layers)

    @classmethod
    def from_config(cls, cfg, atlas: AtlasMapping) -> "BrainSemantoks":
        tok, enc = cfg.tokenizer, cfg.encoder
        kwargs = {}
        if tok.kind == "semantic":
            kwargs = dict(
                std_kernel=tok.std_kernel,
                base_len=tok.base_len,
                scales=tok.scales,
                feedthrough_init=tok.feedthrough_init,
                structured_init_std=tok.structured_init_std,
            )
        return cls(
            atlas,
            cfg.views.t_crop,
            dim=tok.dim,
            patch_len=tok.patch_len,
            tokenizer_kind=tok.kind,
            depth=enc.depth,
            heads=enc.heads,
            mlp_ratio=enc.mlp_ratio,
            layer_scale_init=enc.layer_scale_init,
            head_hidden=enc.head_hidden,
            head_layers=enc.head_layers,
            d_proj=cfg.objective.d_proj,
            tokenizer_kwargs=kwargs,
        )

    @property
    def row_network(self) -> np.ndarray:
        """Network id of every grid row (identity for the semantic tokenizer)."""
        return self.tokenizer.row_network

    @property
    def n_rows(self) -> int:
        return self.encoder.n_rows

    def grid_mask(self, network_mask: torch.Tensor) -> torch.Tensor:
        """Lift a (B, N, P) network-level mask to the (B, G, P) token grid."""
        idx = torch.as_tensor(self.row_network, dtype=torch.long)
        return network_mask.index_select(1, idx)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Backbone outputs for (B, C, T_crop) input: CLS (B, D) and grid (B, G, P, D)."""
        return self.encoder(self.tokenizer(x), mask)

    def project(self, v: torch.Tensor) -> torch.Tensor:
        return self.head(v)


def build_model(cfg, atlas: AtlasMapping, seed: Optional[int] = None) -> BrainSemantoks:
    """Construct a model with parameters drawn from ``seed`` without touching global RNG state."""
    seed = cfg.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BrainSemantoks.from_config(cfg, atlas)
    if cfg.trainer.dtype == "float64":
        model = model.double()
        for blk in model.encoder.blocks:
            blk.reset_layer_scale()
    return model
