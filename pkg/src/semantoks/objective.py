"""Distillation losses, the coding-rate regularizer and the TTR weight schedule.

All inputs named ``z*`` are L2-normalised projector outputs. Teacher tensors
are detached inside every loss, so no gradient can reach them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch


@dataclass
class ObjectiveConfig:
    lambda_tok: float = 0.5
    lambda_ttr: float = 0.5
    ttr_decay_fraction: float = 0.05
    ttr_schedule: str = "cosine"
    eps: float = 0.05
    d_proj: int = 128
    normalize_token_loss: bool = True

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0 < self.ttr_decay_fraction <= 1:
            raise ValueError(f"ttr_decay_fraction must lie in (0, 1], got {self.ttr_decay_fraction}")
        if self.lambda_tok < 0 or self.lambda_ttr < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ttr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown ttr_schedule {self.ttr_schedule!r}")
        if self.d_proj < 1:
            raise ValueError(f"d_proj must be >= 1, got {self.d_proj}")


def sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).sum(dim=-1)


def _half_logdet_spd(m: torch.Tensor) -> torch.Tensor:
    chol = torch.linalg.cholesky(m)
    return torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(dim=-1)


def coding_rate_from_cov(sigma: torch.Tensor, eps: float = 0.05, d_proj: Optional[int] = None) -> torch.Tensor:
    """R_eps(Sigma) = 1/2 logdet(I + d/eps * Sigma) for a PSD ``sigma`` (batched)."""
    d = sigma.shape[-1] if d_proj is None else d_proj
    eye = torch.eye(sigma.shape[-1], dtype=sigma.dtype, device=sigma.device)
    return _half_logdet_spd(eye + (d / eps) * sigma)


def coding_rate(z: torch.Tensor, eps: float = 0.05) -> torch.Tensor:
    """Coding rate of the batch-centred covariance of ``z`` with shape (..., B, D).

    Uses the smaller of the D x D and B x B Gram forms (equal determinants).
    """
    if not torch.isfinite(z).all():
        raise FloatingPointError("coding_rate received non-finite embeddings")
    b, d = z.shape[-2:]
    if b < 2:
        raise ValueError(f"coding rate needs a batch of at least 2, got {b}")
    zc = z - z.mean(dim=-2, keepdim=True)
    scale = d / (eps * b)
    if d <= b:
        gram = zc.transpose(-2, -1) @ zc
        n = d
    else:
        gram = zc @ zc.transpose(-2, -1)
        n = b
    eye = torch.eye(n, dtype=z.dtype, device=z.device)
    return _half_logdet_spd(eye + scale * gram)


def gamma(d_proj: int, batch_size: int) -> float:
    return (d_proj + batch_size) / (d_proj * batch_size)


def cls_loss(
    s1: torch.Tensor,
    s2: torch.Tensor,
    t1: torch.Tensor,
    t2: torch.Tensor,
    gamma: float,
    eps: float = 0.05,
    return_parts: bool = False,
):
    """Cross-view CLS distillation minus the coding rate averaged over both student views."""
    if not (s1.shape == s2.shape == t1.shape == t2.shape):
        raise ValueError(f"batch shape mismatch: {[tuple(v.shape) for v in (s1, s2, t1, t2)]}")
    t1, t2 = t1.detach(), t2.detach()
    distance = (sq_dist(s1, t2) + sq_dist(s2, t1)).mean()
    rate = 0.5 * (coding_rate(s1, eps) + coding_rate(s2, eps))
    loss = distance - gamma * rate
    return (loss, distance, rate) if return_parts else loss


def token_loss(
    zs: Sequence[torch.Tensor],
    zt: Sequence[torch.Tensor],
    masks: Sequence[torch.Tensor],
    normalize: bool = True,
) -> torch.Tensor:
    """Masked-token distillation within each view.

    ``zs[v]``, ``zt[v]``: (B, G, P, D) student / teacher projections of view v;
    ``masks[v]``: (B, G, P) bool. Per item the masked distances are summed (and
    divided by the masked count when ``normalize``), then averaged over views
    and batch.
    """
    per_view = []
    for s, t, m in zip(zs, zt, masks):
        m = m.to(s.dtype)
        count = m.sum(dim=(1, 2))
        if (count == 0).any():
            raise ValueError("token loss needs at least one masked token per item")
        total = (m * sq_dist(s, t.detach())).sum(dim=(1, 2))
        per_view.append(total / count if normalize else total)
    return torch.stack(per_view).mean()


def network_summaries(grid: torch.Tensor) -> torch.Tensor:
    """Average the P patch tokens of each grid row: (B, G, P, D) -> (B, G, D)."""
    if grid.shape[2] == 0:
        raise ValueError("cannot summarise a grid with zero patches")
    return grid.mean(dim=2)


def ttr_loss(
    s1: torch.Tensor,
    s2: torch.Tensor,
    t1: torch.Tensor,
    t2: torch.Tensor,
    gamma: float,
    eps: float = 0.05,
    return_parts: bool = False,
):
    """Teacher-guided temporal regularizer on projected network summaries (B, G, D)."""
    if not (s1.shape == s2.shape == t1.shape == t2.shape):
        raise ValueError(f"summary shape mismatch: {[tuple(v.shape) for v in (s1, s2, t1, t2)]}")
    t1, t2 = t1.detach(), t2.detach()
    distance = (sq_dist(s1, t2) + sq_dist(s2, t1)).sum(dim=1).mean()
    # (G, B, D) batches: one coding rate per network
    rate = 0.5 * (coding_rate(s1.transpose(0, 1), eps) + coding_rate(s2.transpose(0, 1), eps)).sum()
    loss = distance - gamma * rate
    return (loss, distance, rate) if return_parts else loss


def ttr_weight(step: float, total_steps: float, cfg: ObjectiveConfig) -> float:
    if cfg.ttr_schedule == "constant":
        return cfg.lambda_ttr
    horizon = cfg.ttr_decay_fraction * total_steps
    if horizon <= 0 or step >= horizon:
        return 0.0
    return cfg.lambda_ttr * 0.5 * (1.0 + math.cos(math.pi * step / horizon))


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_tok: torch.Tensor
    l_ttr: torch.Tensor
    r_cls: torch.Tensor
    r_ttr: torch.Tensor
    total: torch.Tensor
    ttr_weight_used: float

    def as_floats(self) -> Dict[str, float]:
        out = {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l_cls", "l_tok", "l_ttr", "r_cls", "r_ttr", "total")}
        out["ttr_weight_used"] = float(self.ttr_weight_used)
        return out


def total_loss(
    l_cls: torch.Tensor,
    l_tok: torch.Tensor,
    l_ttr: torch.Tensor,
    step: float,
    total_steps: float,
    cfg: ObjectiveConfig,
    r_cls: Optional[torch.Tensor] = None,
    r_ttr: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Combine components; ``l_cls`` and ``l_ttr`` already include their coding-rate terms."""
    zero = torch.zeros((), dtype=l_cls.dtype)
    r_cls = zero if r_cls is None else r_cls
    r_ttr = zero if r_ttr is None else r_ttr
    for name, v in (("l_cls", l_cls), ("l_tok", l_tok), ("l_ttr", l_ttr), ("r_cls", r_cls), ("r_ttr", r_ttr)):
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise FloatingPointError(f"loss component {name} is not finite")
    w = ttr_weight(step, total_steps, cfg)
    total = l_cls + cfg.lambda_tok * l_tok
    if w > 0:
        total = total + w * l_ttr
    return LossBreakdown(l_cls, l_tok, l_ttr, r_cls, r_ttr, total, w)
