"""Pretraining loop: schedules, AdamW student updates, EMA teacher, checkpoints, metrics."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import struct
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig, config_from_dict
from .dataset import AtlasMapping, ScanTimeSeries, atlas_from_json
from .model import BrainSemantoks, build_model
from .objective import (
    ObjectiveConfig,
    cls_loss,
    gamma,
    network_summaries,
    token_loss,
    total_loss,
    ttr_loss,
    ttr_weight,
)
from .views import augment_physio, corrupt, ring_adjacency, sample_mask, sample_views

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BSCK"
CKPT_VERSION = 1
METRIC_COLUMNS = ("step", "lr", "wd", "alpha", "ttr_w", "l_cls", "l_tok", "l_ttr", "r_cls", "total", "token_cosine")

_NO_DECAY_NAMES = ("cls_token", "mask_token", "row_embed")


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Schedules and EMA
# ---------------------------------------------------------------------------


class Schedule(NamedTuple):
    lr: float
    wd: float
    momentum: float
    ttr_w: float


def _cosine(start: float, end: float, frac: float) -> float:
    if frac <= 0.0:
        return start
    if frac >= 1.0:
        return end
    return start + (end - start) * 0.5 * (1.0 - math.cos(math.pi * frac))


def schedules_at(step: int, total_steps: int, cfg: RunConfig) -> Schedule:
    tr = cfg.trainer
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    warmup = tr.warmup_fraction * total_steps
    if step < warmup:
        lr = tr.base_lr * step / warmup
    else:
        lr = _cosine(tr.base_lr, 0.0, (step - warmup) / max(total_steps - warmup, 1e-12))
    frac = step / total_steps if total_steps else 1.0
    wd = _cosine(tr.wd_start, tr.wd_end, frac)
    momentum = _cosine(tr.momentum_start, tr.momentum_end, frac)
    return Schedule(lr, wd, momentum, ttr_weight(step, total_steps, cfg.objective))


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> torch.nn.Module:
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s for every parameter."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pt.shape)} vs {tuple(ps.shape)}")
        pt.mul_(alpha).add_(ps, alpha=1.0 - alpha)
    return teacher


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


def param_groups(model: torch.nn.Module) -> List[dict]:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim >= 2 and not name.endswith(_NO_DECAY_NAMES):
            decay.append(p)
        else:
            no_decay.append(p)
    return [{"params": decay, "apply_wd": True}, {"params": no_decay, "apply_wd": False, "weight_decay": 0.0}]


@dataclass
class TrainState:
    config: RunConfig
    atlas: AtlasMapping
    student: BrainSemantoks
    teacher: BrainSemantoks
    optimizer: torch.optim.Optimizer
    step: int = 0

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def config_hash(self) -> str:
        return self.config.hash()


def make_optimizer(model: torch.nn.Module, cfg: RunConfig) -> torch.optim.Optimizer:
    tr = cfg.trainer
    return torch.optim.AdamW(
        param_groups(model), lr=tr.base_lr, betas=tr.betas, eps=tr.adam_eps, weight_decay=tr.wd_start
    )


def init_state(cfg: RunConfig, atlas: AtlasMapping) -> TrainState:
    student = build_model(cfg, atlas)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TrainState(cfg, atlas, student, teacher, make_optimizer(student, cfg), 0)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    x1: torch.Tensor
    x2: torch.Tensor
    m1: torch.Tensor
    m2: torch.Tensor
    indices: Tuple[int, ...]
    starts: Tuple[Tuple[int, int], ...]


def sample_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, step, sample) so workers never share state."""
    return np.random.default_rng([seed, step, index])


def make_batch(
    scans: Sequence[ScanTimeSeries],
    indices: Sequence[int],
    step: int,
    cfg: RunConfig,
    row_network: np.ndarray,
    adjacency=None,
) -> Batch:
    vc = cfg.views
    aug = vc.aug_params()
    n_networks = int(np.max(row_network)) + 1
    n_patches = vc.t_crop // cfg.tokenizer.patch_len
    xs = ([], [])
    ms = ([], [])
    starts = []
    for i in indices:
        rng = sample_rng(cfg.seed, step, int(i))
        views = sample_views(scans[i], vc.t_crop, rng)
        starts.append(tuple(v.start for v in views))
        for k, view in enumerate(views):
            if vc.corruption:
                view = corrupt(view, aug, rng)
            if vc.physio_kind is not None:
                view = augment_physio(view, vc.physio_kind, vc.physio_intensity, rng, adjacency)
            mask = sample_mask(n_networks, n_patches, vc.mask_ratio, vc.mask_strategy, rng)
            xs[k].append(view.data)
            ms[k].append(mask.bits[row_network])
    dtype = torch.float64 if cfg.trainer.dtype == "float64" else torch.float32
    to_x = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)
    to_m = lambda a: torch.as_tensor(np.stack(a), dtype=torch.bool)
    return Batch(to_x(xs[0]), to_x(xs[1]), to_m(ms[0]), to_m(ms[1]), tuple(int(i) for i in indices), tuple(starts))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def steps_per_epoch(n_scans: int, batch_size: int) -> int:
    return n_scans // batch_size


# ---------------------------------------------------------------------------
# Step
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    lr: float
    wd: float
    alpha: float
    ttr_w: float
    l_cls: float
    l_tok: float
    l_ttr: float
    r_cls: float
    total: float
    token_cosine: float

    def row(self) -> List:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def masked_cosine(zs: Sequence[torch.Tensor], zt: Sequence[torch.Tensor], masks: Sequence[torch.Tensor]) -> float:
    """Mean cosine similarity between student and teacher vectors at masked grid positions."""
    num, den = 0.0, 0
    for s, t, m in zip(zs, zt, masks):
        cos = torch.nn.functional.cosine_similarity(s, t, dim=-1)
        num += float(cos[m].sum())
        den += int(m.sum())
    return num / den if den else float("nan")


@dataclass
class TeacherTargets:
    """Projected teacher outputs for both views (no gradient)."""

    cls1: torch.Tensor
    cls2: torch.Tensor
    grid1: torch.Tensor
    grid2: torch.Tensor
    summary1: Optional[torch.Tensor] = None
    summary2: Optional[torch.Tensor] = None


@torch.no_grad()
def teacher_targets(teacher: BrainSemantoks, batch: Batch, with_summaries: bool = True) -> TeacherTargets:
    t_cls1, t_grid1 = teacher(batch.x1)
    t_cls2, t_grid2 = teacher(batch.x2)
    out = TeacherTargets(teacher.project(t_cls1), teacher.project(t_cls2), teacher.project(t_grid1),
                         teacher.project(t_grid2))
    if with_summaries:
        out.summary1 = teacher.project(network_summaries(t_grid1))
        out.summary2 = teacher.project(network_summaries(t_grid2))
    return out


def compute_losses(student: BrainSemantoks, teacher: BrainSemantoks, batch: Batch, step: int, total_steps: int,
                   cfg: ObjectiveConfig, targets: Optional[TeacherTargets] = None):
    """Forward both networks on both views; returns (LossBreakdown, token_cosine).

    ``targets`` may be passed in to reuse teacher outputs for a fixed batch.
    """
    b = batch.x1.shape[0]
    g = gamma(cfg.d_proj, b)
    if targets is None:
        targets = teacher_targets(teacher, batch, with_summaries=cfg.lambda_ttr > 0)
    s_cls1, s_grid1 = student(batch.x1, batch.m1)
    s_cls2, s_grid2 = student(batch.x2, batch.m2)
    zs_cls1, zs_cls2 = student.project(s_cls1), student.project(s_cls2)
    zs_grid1, zs_grid2 = student.project(s_grid1), student.project(s_grid2)

    l_cls, _, r_cls = cls_loss(zs_cls1, zs_cls2, targets.cls1, targets.cls2, g, cfg.eps, return_parts=True)
    l_tok = token_loss([zs_grid1, zs_grid2], [targets.grid1, targets.grid2], [batch.m1, batch.m2],
                       cfg.normalize_token_loss)

    zero = torch.zeros((), dtype=l_cls.dtype)
    l_ttr, r_ttr = zero, zero
    w = ttr_weight(step, total_steps, cfg)
    if cfg.lambda_ttr > 0:
        # past the decay horizon the TTR value is still logged but kept out of the graph
        ctx = torch.enable_grad() if w > 0 else torch.no_grad()
        with ctx:
            sb1 = student.project(network_summaries(s_grid1))
            sb2 = student.project(network_summaries(s_grid2))
            l_ttr, _, r_ttr = ttr_loss(sb1, sb2, targets.summary1, targets.summary2, g, cfg.eps, return_parts=True)

    breakdown = total_loss(l_cls, l_tok, l_ttr, step, total_steps, cfg, r_cls, r_ttr)
    with torch.no_grad():
        cosine = masked_cosine([zs_grid1, zs_grid2], [targets.grid1, targets.grid2], [batch.m1, batch.m2])
    return breakdown, cosine


def train_step(state: TrainState, batch: Batch, total_steps: int) -> Tuple[TrainState, StepMetrics]:
    """One AdamW update of the student followed by the EMA update of the teacher."""
    cfg = state.config
    sched = schedules_at(state.step, total_steps, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = sched.lr
        group["weight_decay"] = sched.wd if group["apply_wd"] else 0.0

    state.optimizer.zero_grad(set_to_none=True)
    try:
        losses, cosine = compute_losses(state.student, state.teacher, batch, state.step, total_steps, cfg.objective)
    except FloatingPointError as exc:
        raise NumericalError(f"step {state.step}: {exc}") from exc
    if not torch.isfinite(losses.total):
        raise NumericalError(f"step {state.step}: non-finite total loss {losses.as_floats()}")
    losses.total.backward()
    for name, p in state.student.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"step {state.step}: non-finite gradient in {name}")
    if cfg.trainer.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.trainer.grad_clip)
    state.optimizer.step()
    ema_update(state.teacher, state.student, sched.momentum)

    vals = losses.as_floats()
    metrics = StepMetrics(
        step=state.step,
        lr=sched.lr,
        wd=sched.wd,
        alpha=sched.momentum,
        ttr_w=sched.ttr_w,
        l_cls=vals["l_cls"],
        l_tok=vals["l_tok"],
        l_ttr=vals["l_ttr"],
        r_cls=vals["r_cls"],
        total=vals["total"],
        token_cosine=cosine,
    )
    state.step += 1
    return state, metrics


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.bool: 3}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}
_NP = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}


def _state_tensors(state: TrainState) -> Dict[str, torch.Tensor]:
    tensors: Dict[str, torch.Tensor] = {}
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        for name, t in model.state_dict().items():
            tensors[f"{prefix}.{name}"] = t
    names = {id(p): n for n, p in state.student.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(st[key])
    tensors["atlas.roi_network"] = torch.as_tensor(state.atlas.roi_network, dtype=torch.int64)
    return tensors


def checkpoint_save(state: TrainState, path) -> None:
    meta = {
        "config": state.config.to_dict(),
        "network_names": state.atlas.network_names,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    hash_bytes = state.config_hash.encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<I", len(hash_bytes)) + hash_bytes)
    buf.write(struct.pack("<Q", state.step))
    buf.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
    tensors = _state_tensors(state)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"cannot serialise dtype {t.dtype} of {name}")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<BB", _DTYPES[t.dtype], t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=_NP[t.dtype]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_checkpoint(path) -> Tuple[str, int, dict, Dict[str, torch.Tensor]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    (hlen,) = r.unpack("<I")
    config_hash = r.take(hlen).decode()
    (step,) = r.unpack("<Q")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES_INV:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES_INV[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_NP[dtype]).itemsize
        arr = np.frombuffer(r.take(n_bytes), dtype=_NP[dtype]).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(r.raw) - r.pos} trailing bytes)")
    return config_hash, step, meta, tensors


def checkpoint_load(path, expected_hash: Optional[str] = None, allow_config_mismatch: bool = False) -> TrainState:
    """Rebuild the full training state; a config-hash mismatch needs ``allow_config_mismatch``."""
    config_hash, step, meta, tensors = read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    if cfg.hash() != config_hash:
        raise CheckpointError(f"{path}: stored config does not match its recorded hash")
    if expected_hash is not None and expected_hash != config_hash:
        msg = f"{path}: config hash {config_hash[:12]} differs from expected {expected_hash[:12]}"
        if not allow_config_mismatch:
            raise ConfigMismatchError(msg + " (pass an explicit override to load anyway)")
        warnings.warn(msg, stacklevel=2)
    atlas = AtlasMapping(tensors["atlas.roi_network"].numpy(), meta["network_names"])
    state = init_state(cfg, atlas)
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        sd = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        model.load_state_dict(sd, strict=True)
    names = dict(state.student.named_parameters())
    for name, p in names.items():
        key = f"optim.{name}"
        if f"{key}.exp_avg" in tensors:
            state.optimizer.state[p] = {
                "step": tensors[f"{key}.step"].clone(),
                "exp_avg": tensors[f"{key}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
            }
    state.step = step
    return state


def load_teacher(path) -> Tuple[BrainSemantoks, RunConfig]:
    """Teacher model and its config; the student is discarded."""
    state = checkpoint_load(path)
    teacher = state.teacher.eval()
    return teacher, state.config


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@contextmanager
def run_lock(run_dir: Path):
    lock = Path(run_dir) / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"run directory {run_dir} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_metrics_header(path: Path, keep_before: Optional[int] = None) -> None:
    rows = []
    if keep_before is not None and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) < keep_before]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def pretrain(
    cfg: RunConfig,
    scans: Sequence[ScanTimeSeries],
    atlas: AtlasMapping,
    out_dir,
    resume=None,
    allow_config_mismatch: bool = False,
    max_steps: Optional[int] = None,
) -> TrainState:
    """Train from scratch (or from ``resume``) writing metrics and checkpoints to ``out_dir``.

    ``max_steps`` stops early without changing the schedule horizon (used to
    simulate interruptions).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = cfg.trainer
    if tr.n_train_scans is not None:
        scans = list(scans)[: tr.n_train_scans]
    spe = steps_per_epoch(len(scans), tr.batch_size)
    if spe < 1:
        raise ValueError(f"{len(scans)} scans cannot fill one batch of {tr.batch_size}")
    total_steps = spe * tr.epochs
    metrics_path = out_dir / "metrics.csv"

    with run_lock(out_dir):
        if resume is not None:
            state = checkpoint_load(resume, expected_hash=cfg.hash(), allow_config_mismatch=allow_config_mismatch)
            if state.config_hash != cfg.hash():
                # explicit override: keep the restored weights and moments, continue under the new config
                state.config = cfg
                for group in state.optimizer.param_groups:
                    group["betas"], group["eps"] = tuple(tr.betas), tr.adam_eps
            _write_metrics_header(metrics_path, keep_before=state.step)
        else:
            state = init_state(cfg, atlas)
            _write_metrics_header(metrics_path)
        cfg.save(out_dir / "config.json")
        (out_dir / "metrics.meta.json").write_text(json.dumps({"config_hash": cfg.hash(), "columns": METRIC_COLUMNS}) + "\n")
        adjacency = ring_adjacency(atlas) if cfg.views.physio_kind == "roi_mix" else None
        row_network = state.student.row_network
        stop = total_steps if max_steps is None else min(total_steps, max_steps)
        with open(metrics_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            while state.step < stop:
                epoch, pos = divmod(state.step, spe)
                order = epoch_order(cfg.seed, epoch, len(scans))
                idx = order[pos * tr.batch_size : (pos + 1) * tr.batch_size]
                batch = make_batch(scans, idx, state.step, cfg, row_network, adjacency)
                state, m = train_step(state, batch, total_steps)
                writer.writerow(m.row())
                fh.flush()
                if state.step % spe == 0:
                    ep = state.step // spe
                    log.info("epoch %d/%d step %d total=%.4f token_cos=%.3f", ep, tr.epochs, m.step, m.total,
                             m.token_cosine)
                    checkpoint_save(state, out_dir / "last.bsck")
                    if tr.checkpoint_every and ep % tr.checkpoint_every == 0:
                        checkpoint_save(state, out_dir / f"epoch_{ep:04d}.bsck")
            if state.step == total_steps:
                checkpoint_save(state, out_dir / "final.bsck")
    return state


def read_metrics(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}
