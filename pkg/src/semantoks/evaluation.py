"""Frozen-teacher features, the linear-probing protocol and interpretability probes."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import EvalConfig
from .dataset import ScanTimeSeries
from .model import BrainSemantoks

FEATURE_MAGIC = b"BSFT"
FEATURE_VERSION = 1


@dataclass
class FeatureVector:
    values: np.ndarray
    scan_id: str
    crop: int


def crop_starts(n_timepoints: int, t_crop: int, n_crops: int = 8) -> np.ndarray:
    if n_timepoints < t_crop:
        raise ValueError(f"T={n_timepoints} < T_crop={t_crop}")
    return np.floor(np.linspace(0, n_timepoints - t_crop, n_crops)).astype(np.int64)


def keep_only_mask(model: BrainSemantoks, keep_network: int) -> torch.Tensor:
    """(G, P) grid mask hiding every row outside ``keep_network``."""
    rows = torch.as_tensor(np.asarray(model.row_network) != keep_network)
    return rows[:, None].expand(model.n_rows, model.n_patches)


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def features_from_input(model: BrainSemantoks, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """CLS concatenated with the mean of all grid tokens, width 2 * D."""
    cls, grid = model(x, mask)
    return torch.cat([cls, grid.mean(dim=(1, 2))], dim=-1)


@torch.no_grad()
def extract_features(
    scan: ScanTimeSeries,
    model: BrainSemantoks,
    n_crops: int = 8,
    keep_network: Optional[int] = None,
) -> List[FeatureVector]:
    """One feature per equally spaced crop; optionally mask all networks but ``keep_network``."""
    starts = crop_starts(scan.n_timepoints, model.t_crop, n_crops)
    x = np.stack([scan.data[:, s : s + model.t_crop] for s in starts])
    x = torch.as_tensor(x, dtype=_param_dtype(model))
    mask = None
    if keep_network is not None:
        mask = keep_only_mask(model, keep_network)[None].expand(len(starts), -1, -1)
    feats = features_from_input(model.eval(), x, mask).double().numpy()
    return [FeatureVector(feats[k], scan.scan_id, k) for k in range(len(starts))]


def feature_matrix(
    scans: Sequence[ScanTimeSeries],
    model: BrainSemantoks,
    n_crops: int = 8,
    keep_network: Optional[int] = None,
) -> np.ndarray:
    """(S, n_crops, 2D) array of per-crop features."""
    return np.stack([np.stack([f.values for f in extract_features(s, model, n_crops, keep_network)]) for s in scans])


# ---------------------------------------------------------------------------
# Probe
# ---------------------------------------------------------------------------


def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray, n_classes: Optional[int] = None) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = np.unique(y_true)
    return float(np.mean([np.mean(y_pred[y_true == c] == c) for c in classes]))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def stratified_split(labels: np.ndarray, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Tuple[np.ndarray, ...]:
    """Per-class shuffled train/val/test index split."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 104729])
    parts: List[List[int]] = [[] for _ in fractions]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.round(np.cumsum(fractions)[:-1] * len(idx)).astype(int)
        for part, chunk in zip(parts, np.split(idx, bounds)):
            part.extend(chunk.tolist())
    return tuple(np.sort(np.array(p, dtype=np.int64)) for p in parts)


@dataclass
class ProbeResult:
    val_balanced_accuracy: Dict[float, float]
    selected_lr: float
    test_balanced_accuracy: float
    confusion: np.ndarray
    n_classes: int
    test_predictions: np.ndarray = field(repr=False, default=None)


class ProbeHead(nn.Module):
    """BatchNorm (no affine) followed by a linear classifier."""

    def __init__(self, n_features: int, n_classes: int, bn_eps: float = 1e-5):
        super().__init__()
        self.bn = nn.BatchNorm1d(n_features, affine=False, eps=bn_eps)
        self.linear = nn.Linear(n_features, n_classes)

    def forward(self, x):
        return self.linear(self.bn(x))


def init_probe_weights(n_features: int, n_classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 31337])
    bound = 1.0 / np.sqrt(n_features)
    w = rng.uniform(-bound, bound, size=(n_classes, n_features))
    b = rng.uniform(-bound, bound, size=n_classes)
    return w, b


def probe_batch_size(n_samples: int, max_batch: int = 256) -> int:
    return max(2, min(max_batch, n_samples // 8))


def probe_batches(n_samples: int, batch_size: int, epoch: int, seed: int) -> List[np.ndarray]:
    """Shuffled mini-batches for one epoch; a trailing batch of one sample is dropped."""
    perm = np.random.default_rng([seed, 271828, epoch]).permutation(n_samples)
    out = [perm[i : i + batch_size] for i in range(0, n_samples, batch_size)]
    return [b for b in out if len(b) >= 2]


def fit_probe_head(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float, cfg: EvalConfig, seed: int) -> ProbeHead:
    xt = torch.as_tensor(x, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.long)
    head = ProbeHead(x.shape[1], n_classes, cfg.bn_eps).double()
    w, b = init_probe_weights(x.shape[1], n_classes, seed)
    with torch.no_grad():
        head.linear.weight.copy_(torch.as_tensor(w))
        head.linear.bias.copy_(torch.as_tensor(b))
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=cfg.momentum)
    loss_fn = nn.CrossEntropyLoss()
    bs = probe_batch_size(len(x), cfg.max_batch)
    head.train()
    for epoch in range(cfg.epochs):
        for idx in probe_batches(len(x), bs, epoch, seed):
            it = torch.as_tensor(idx)
            opt.zero_grad()
            loss_fn(head(xt[it]), yt[it]).backward()
            opt.step()
    return head.eval()


@torch.no_grad()
def scan_logits(head: ProbeHead, feats: np.ndarray) -> np.ndarray:
    """Average per-crop logits over crops: (S, K, F) -> (S, n_classes)."""
    s, k, f = feats.shape
    logits = head(torch.as_tensor(feats.reshape(s * k, f), dtype=torch.float64)).numpy()
    return logits.reshape(s, k, -1).mean(axis=1)


def linear_probe(
    train: Tuple[np.ndarray, np.ndarray],
    val: Tuple[np.ndarray, np.ndarray],
    test: Tuple[np.ndarray, np.ndarray],
    cfg: Optional[EvalConfig] = None,
    seed: int = 0,
) -> ProbeResult:
    """Fit one BN+linear head per learning rate, select on validation, report test.

    Each split is ``(features (S, K, F), labels (S,))`` with K crops per scan.
    Training uses every crop as a sample; evaluation averages crop logits.
    """
    cfg = cfg or EvalConfig()
    (xtr, ytr), (xva, yva), (xte, yte) = train, val, test
    ytr, yva, yte = (np.asarray(v, dtype=np.int64) for v in (ytr, yva, yte))
    n_classes = int(max(ytr.max(), yva.max(), yte.max())) + 1
    if n_classes < 2:
        raise ValueError("probing needs at least two classes")
    for name, y in (("train", ytr), ("val", yva), ("test", yte)):
        absent = sorted(set(range(n_classes)) - set(np.unique(y).tolist()))
        if absent:
            raise ValueError(f"class(es) {absent} absent from the {name} split")
    k = xtr.shape[1]
    x_flat = xtr.reshape(-1, xtr.shape[-1])
    y_flat = np.repeat(ytr, k)

    heads, val_ba = {}, {}
    for lr in cfg.learning_rates:
        heads[lr] = fit_probe_head(x_flat, y_flat, n_classes, lr, cfg, seed)
        val_ba[lr] = balanced_accuracy(yva, scan_logits(heads[lr], xva).argmax(axis=1))
    best = max(cfg.learning_rates, key=lambda lr: val_ba[lr])
    pred = scan_logits(heads[best], xte).argmax(axis=1)
    return ProbeResult(
        val_balanced_accuracy=val_ba,
        selected_lr=best,
        test_balanced_accuracy=balanced_accuracy(yte, pred),
        confusion=confusion_matrix(yte, pred, n_classes),
        n_classes=n_classes,
        test_predictions=pred,
    )


def probe_model(
    model: BrainSemantoks,
    scans: Sequence[ScanTimeSeries],
    labels: np.ndarray,
    splits: Tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: Optional[EvalConfig] = None,
    keep_network: Optional[int] = None,
    features: Optional[np.ndarray] = None,
) -> ProbeResult:
    cfg = cfg or EvalConfig()
    if features is None:
        features = feature_matrix(scans, model, cfg.n_crops, keep_network)
    labels = np.asarray(labels)
    parts = [(features[idx], labels[idx]) for idx in splits]
    return linear_probe(*parts, cfg=cfg, seed=cfg.split_seed)


def network_importance(
    model: BrainSemantoks,
    scans: Sequence[ScanTimeSeries],
    labels: np.ndarray,
    splits: Tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: Optional[EvalConfig] = None,
) -> np.ndarray:
    """Test balanced accuracy when only network n is visible, for every network n."""
    n_networks = int(np.max(model.row_network)) + 1
    return np.array(
        [probe_model(model, scans, labels, splits, cfg, keep_network=n).test_balanced_accuracy for n in range(n_networks)]
    )


def write_importance_csv(path, scores: np.ndarray, network_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network_id", "network", "balanced_accuracy"])
        for i, (name, s) in enumerate(zip(network_names, scores)):
            w.writerow([i, name, f"{s:.6f}"])


def write_probe_csv(path, result: ProbeResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lr", "val_balanced_accuracy", "selected", "test_balanced_accuracy"])
        for lr, ba in result.val_balanced_accuracy.items():
            sel = lr == result.selected_lr
            w.writerow([lr, f"{ba:.6f}", int(sel), f"{result.test_balanced_accuracy:.6f}" if sel else ""])


# ---------------------------------------------------------------------------
# Single-patch inference on short segments
# ---------------------------------------------------------------------------


def build_single_patch(segment, strategy: str, patch_len: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Construct one (C, patch_len) patch from a short segment.

    ``pad``: one block, zero-padded. ``continuous``: a contiguous window of a
    longer double-block recording (random start if ``rng`` is given).
    ``concat``: two blocks concatenated, each trimmed by the same amount when
    they do not fit.
    """
    if strategy == "concat":
        a, b = (np.asarray(s, dtype=np.float64) for s in segment)
        excess = a.shape[1] + b.shape[1] - patch_len
        if excess > 0:
            cut_a, cut_b = excess // 2, excess - excess // 2
            if cut_a >= a.shape[1] or cut_b >= b.shape[1]:
                raise ValueError("blocks too unequal to trim equally into one patch")
            a, b = a[:, : a.shape[1] - cut_a], b[:, : b.shape[1] - cut_b]
        x = np.concatenate([a, b], axis=1)
    else:
        x = np.asarray(segment, dtype=np.float64)
        if strategy == "continuous" and x.shape[1] > patch_len:
            start = int(rng.integers(0, x.shape[1] - patch_len + 1)) if rng is not None else 0
            x = x[:, start : start + patch_len]
        elif strategy not in ("pad", "continuous"):
            raise ValueError(f"unknown single-patch strategy {strategy!r}")
    if x.shape[1] == 0:
        raise ValueError("empty segment")
    if x.shape[1] > patch_len:
        raise ValueError(f"segment of length {x.shape[1]} exceeds the patch length {patch_len}")
    if x.shape[1] < patch_len:
        x = np.pad(x, ((0, 0), (0, patch_len - x.shape[1])))
    return x


def single_patch_input(patch: np.ndarray, model: BrainSemantoks, position: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Full-length input holding ``patch`` at temporal slot ``position``, other slots masked."""
    p, L = model.n_patches, model.patch_len
    x = np.zeros((patch.shape[0], model.t_crop))
    x[:, position * L : (position + 1) * L] = patch
    mask = torch.ones(model.n_rows, p, dtype=torch.bool)
    mask[:, position] = False
    return torch.as_tensor(x[None], dtype=_param_dtype(model)), mask[None]


def single_patch_features(
    segment,
    strategy: str,
    model: BrainSemantoks,
    position: str = "first",
    rng: Optional[np.random.Generator] = None,
    scan_id: str = "",
) -> FeatureVector:
    """Teacher features from a single real patch; ``position`` is 'first', 'last' or 'random'."""
    patch = build_single_patch(segment, strategy, model.patch_len, rng)
    if position == "first":
        slot = 0
    elif position == "last":
        slot = model.n_patches - 1
    elif position == "random":
        slot = 0 if (rng if rng is not None else np.random.default_rng()).random() < 0.5 else model.n_patches - 1
    else:
        raise ValueError(f"position must be 'first', 'last' or 'random', got {position!r}")
    x, mask = single_patch_input(patch, model, slot)
    feats = features_from_input(model.eval(), x, mask)[0].double().numpy()
    return FeatureVector(feats, scan_id, slot)


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------


def write_features(path, features: Sequence[FeatureVector]) -> None:
    dim = len(features[0].values) if features else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, dim, len(features)))
        for f in features:
            if len(f.values) != dim:
                raise ValueError("all cached features must share one width")
            sid = f.scan_id.encode()
            fh.write(struct.pack("<I", len(sid)) + sid + struct.pack("<I", f.crop))
            fh.write(np.asarray(f.values, dtype="<f4").tobytes())


def read_features(path) -> List[FeatureVector]:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature cache")
    version, dim, count = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    pos, out = 16, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        sid = raw[pos + 4 : pos + 4 + n].decode()
        (crop,) = struct.unpack_from("<I", raw, pos + 4 + n)
        pos += 8 + n
        vals = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        out.append(FeatureVector(vals, sid, crop))
    if pos != len(raw):
        raise ValueError(f"{path}: corrupt feature cache")
    return out
