"""Shared fixtures-by-function for the test suite: toy configs and a finite-difference checker."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np
import torch

from semantoks.config import RunConfig, toy_config
from semantoks.dataset import AtlasMapping, ScanTimeSeries, block_atlas


def tiny_atlas(counts=(3, 3)) -> AtlasMapping:
    return block_atlas(list(counts))


def grad_config(**overrides) -> RunConfig:
    """C=6, N=2, P=2, D=16, D_proj=4, depth=2, B=4 in float64."""
    base = {
        "tokenizer.dim": 16,
        "tokenizer.patch_len": 4,
        "views.t_crop": 8,
        "encoder.depth": 2,
        "encoder.heads": 2,
        "encoder.head_hidden": 16,
        "objective.d_proj": 4,
        "trainer.batch_size": 4,
        "trainer.dtype": "float64",
        "data.synth.n_rois": 6,
    }
    base.update(overrides)
    return toy_config(**base)


def random_scans(n: int, n_rois: int, n_timepoints: int, seed: int = 0, dt: float = 2.0):
    rng = np.random.default_rng(seed)
    return [
        ScanTimeSeries(rng.standard_normal((n_rois, n_timepoints)), dt, f"s{i:03d}", {"label": i % 3})
        for i in range(n)
    ]


def central_difference_check(
    params: Sequence[torch.nn.Parameter],
    names: Sequence[str],
    losses: Callable[[], Dict[str, torch.Tensor]],
    h: float = 1e-5,
) -> Dict[str, float]:
    """Relative error per loss between autograd and central differences.

    ``losses`` recomputes a dict of scalar losses from the current parameter
    values. Every scalar entry of every parameter is perturbed, so a single
    sweep checks all losses at once. The error is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` over the concatenated gradient.
    """
    keys = list(losses().keys())
    auto = {}
    for k in keys:
        for p in params:
            p.grad = None
        losses()[k].backward()
        auto[k] = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1) for p in params])

    fd = {k: torch.zeros_like(auto[k]) for k in keys}
    offset = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                plus = {k: v.item() for k, v in losses().items()}
                flat[j] = orig - h
                minus = {k: v.item() for k, v in losses().items()}
                flat[j] = orig
                for k in keys:
                    fd[k][offset + j] = (plus[k] - minus[k]) / (2 * h)
            offset += flat.numel()
    out = {}
    for k in keys:
        scale = max(auto[k].norm().item(), fd[k].norm().item())
        out[k] = (auto[k] - fd[k]).norm().item() / scale if scale > 0 else 0.0
    return out
