"""Command-line entry points.

    semantoks generate   --config cfg.json --out data/
    semantoks preprocess --config cfg.json --manifest data/manifest.json --out prep/
    semantoks pretrain   --config cfg.json --manifest prep/manifest.json --out run/ [--resume run/last.bsck]
    semantoks probe      --checkpoint run/final.bsck --manifest prep/manifest.json --out probe/
    semantoks importance --checkpoint run/final.bsck --manifest prep/manifest.json --out probe/
    semantoks inspect    run/ [--out run/]

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .dataset import (
    AtlasError,
    ManifestEntry,
    ScanFormatError,
    default_atlas,
    generate_synthetic,
    load_atlas,
    load_manifest,
    preprocess,
    write_atlas,
    write_manifest,
    write_scan,
)
from .evaluation import network_importance, probe_model, stratified_split, write_importance_csv, write_probe_csv
from .trainer import ConfigMismatchError, NumericalError, checkpoint_load, pretrain, read_metrics

log = logging.getLogger("semantoks")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

TRAJECTORY_COLUMNS = ("step", "total", "l_cls", "l_tok", "l_ttr", "r_cls", "ttr_w", "token_cosine")


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _atlas(cfg: RunConfig):
    return load_atlas(cfg.data.atlas) if cfg.data.atlas else default_atlas()


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CLIError(EXIT_IO, f"output directory {out} is not writable: {exc}") from exc
    return out


def _set_workers(n: int) -> None:
    if n < 1:
        raise CLIError(EXIT_CONFIG, "--workers must be >= 1")
    torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    manifest = generate_synthetic(cfg.data.synth, cfg.seed, out, _atlas(cfg))
    print(f"wrote {len(manifest)} scans to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    manifest = load_manifest(args.manifest)
    atlas = manifest.load_atlas()
    scan_dir = out / "scans"
    scan_dir.mkdir(exist_ok=True)
    entries = []
    for scan in manifest.load_scans(cfg.data.preprocess):
        path = scan_dir / f"{scan.scan_id}.bstk"
        write_scan(scan, path)
        entries.append(ManifestEntry(scan.scan_id, path, scan.labels))
    write_atlas(atlas, out / "atlas.json")
    write_manifest(entries, out / "manifest.json")
    print(f"preprocessed {len(entries)} scans into {out / 'manifest.json'}")
    return EXIT_OK


def _load_training_scans(cfg: RunConfig, manifest_path, skip_preprocess: bool):
    manifest = load_manifest(manifest_path)
    atlas = load_atlas(cfg.data.atlas) if cfg.data.atlas else manifest.load_atlas()
    if atlas.n_rois != manifest.n_rois:
        raise CLIError(EXIT_CONFIG, f"data.atlas has {atlas.n_rois} ROIs but scans have {manifest.n_rois}")
    scans = manifest.load_scans(None if skip_preprocess else cfg.data.preprocess)
    return manifest, atlas, scans


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    _, atlas, scans = _load_training_scans(cfg, args.manifest, args.skip_preprocess)
    state = pretrain(cfg, scans, atlas, out, resume=args.resume, allow_config_mismatch=args.allow_config_mismatch)
    print(f"finished at step {state.step}; checkpoints and metrics.csv in {out}")
    return EXIT_OK


def _probe_inputs(args):
    state = checkpoint_load(args.checkpoint)
    cfg = state.config
    if args.config:
        # only the eval section is taken from an explicit config; the model is fixed by the checkpoint
        cfg.eval = load_config(args.config).eval
    if args.label:
        cfg.eval.label = args.label
    if args.split_seed is not None:
        cfg.eval.split_seed = args.split_seed
    manifest = load_manifest(args.manifest)
    try:
        labels = manifest.labels(cfg.eval.label)
    except KeyError as exc:
        raise CLIError(EXIT_CONFIG, f"eval.label: {exc.args[0]}") from None
    scans = manifest.load_scans(None if args.skip_preprocess else cfg.data.preprocess)
    splits = stratified_split(labels, cfg.eval.split, cfg.eval.split_seed)
    return state.teacher.eval(), cfg, scans, labels, splits, manifest


def cmd_probe(args) -> int:
    out = _out_dir(args.out)
    model, cfg, scans, labels, splits, _ = _probe_inputs(args)
    result = probe_model(model, scans, labels, splits, cfg.eval)
    write_probe_csv(out / "probe.csv", result)
    print(f"selected lr={result.selected_lr} test balanced accuracy={result.test_balanced_accuracy:.4f}")
    return EXIT_OK


def cmd_importance(args) -> int:
    out = _out_dir(args.out)
    model, cfg, scans, labels, splits, _ = _probe_inputs(args)
    scores = network_importance(model, scans, labels, splits, cfg.eval)
    write_importance_csv(out / "importance.csv", scores, model.atlas.network_names)
    for name, s in zip(model.atlas.network_names, scores):
        print(f"{name:>14s} {s:.4f}")
    return EXIT_OK


def inspect_run(run_dir, out_path=None) -> dict:
    """Write the loss / token_cosine trajectories of a run as CSV and return a summary."""
    run_dir = Path(run_dir)
    metrics = read_metrics(run_dir / "metrics.csv")
    n = len(metrics["step"])
    out_path = Path(out_path) if out_path else run_dir / "trajectory.csv"
    rows = np.stack([metrics[c] for c in TRAJECTORY_COLUMNS], axis=1) if n else np.zeros((0, len(TRAJECTORY_COLUMNS)))
    with open(out_path, "w") as fh:
        fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{int(r[0])}," + ",".join(repr(float(v)) for v in r[1:]) + "\n")
    summary = {"steps": n, "trajectory": str(out_path)}
    if n:
        cos = metrics["token_cosine"]
        above = np.nonzero(cos > 0.95)[0]
        summary.update(
            final_total=float(metrics["total"][-1]),
            min_total=float(metrics["total"].min()),
            final_token_cosine=float(cos[-1]),
            max_token_cosine=float(cos.max()),
            first_step_above_0_95=int(metrics["step"][above[0]]) if len(above) else None,
        )
    return summary


def cmd_inspect(args) -> int:
    run_dir = Path(args.run_dir)
    out = _out_dir(args.out) / "trajectory.csv" if args.out else None
    summary = inspect_run(run_dir, out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semantoks", description="Network-tokenized fMRI self-distillation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration JSON")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--workers", type=int, default=1, help="torch intra-op threads (1 = deterministic mode)")

    sp = sub.add_parser("generate", help="write a synthetic dataset with planted labels")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("preprocess", help="bandpass / resample / z-score every scan of a manifest")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("pretrain", help="self-distillation pretraining")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--allow-config-mismatch", action="store_true", help="resume even if the config hash differs")
    sp.add_argument("--skip-preprocess", action="store_true", help="manifest scans are already preprocessed")
    sp.set_defaults(func=cmd_pretrain)

    for name, func, doc in (
        ("probe", cmd_probe, "linear probe on frozen teacher features"),
        ("importance", cmd_importance, "per-network probe accuracy with all other networks masked"),
    ):
        sp = sub.add_parser(name, help=doc)
        common(sp, config_required=False)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--label", default=None, help="label name (default: eval.label)")
        sp.add_argument("--split-seed", type=int, default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--skip-preprocess", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("inspect", help="export loss and token_cosine trajectories of a run")
    sp.add_argument("run_dir")
    sp.add_argument("--out", default=None)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_workers(args.workers)
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc} (last good checkpoint kept)", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ScanFormatError, AtlasError, RuntimeError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
