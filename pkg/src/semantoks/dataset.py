"""Scan storage, preprocessing, atlas mapping and the synthetic fMRI generator.

Scans are ROI x time matrices that have already been parcellated. Everything in
this module is pure per scan; arrays are held as float64 in memory and stored
as float32 on disk.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SCAN_MAGIC = b"BSTK"
SCAN_VERSION = 1
_SCAN_HEADER = struct.Struct("<4sIIId")

DEFAULT_BAND = (0.01, 0.1)
PREPROCESS_STEPS = ("bandpass", "resample", "zscore")


class ScanFormatError(ValueError):
    """Raised when a scan file or matrix violates the storage contract."""


class AtlasError(ValueError):
    pass


@dataclass
class ScanTimeSeries:
    data: np.ndarray
    dt: float
    scan_id: str = ""
    labels: Dict[str, int] = field(default_factory=dict)
    degenerate: Tuple[int, ...] = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ScanFormatError(f"scan must be a non-empty C x T matrix, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ScanFormatError("non-finite entry in scan data")
        if not self.dt > 0:
            raise ScanFormatError(f"dt must be positive, got {self.dt}")

    @property
    def n_rois(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]

    def replace(self, data: np.ndarray, dt: Optional[float] = None, degenerate=None) -> "ScanTimeSeries":
        return ScanTimeSeries(
            data=data,
            dt=self.dt if dt is None else dt,
            scan_id=self.scan_id,
            labels=dict(self.labels),
            degenerate=self.degenerate if degenerate is None else tuple(degenerate),
        )


# ---------------------------------------------------------------------------
# Binary scan format
# ---------------------------------------------------------------------------


def write_scan(scan: ScanTimeSeries, path) -> None:
    """Write ``scan`` in the little-endian BSTK format (float32 payload)."""
    c, t = scan.data.shape
    payload = np.ascontiguousarray(scan.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ScanFormatError("non-finite entry after float32 conversion")
    with open(path, "wb") as fh:
        fh.write(_SCAN_HEADER.pack(SCAN_MAGIC, SCAN_VERSION, c, t, float(scan.dt)))
        fh.write(payload.tobytes(order="C"))


def read_scan_header(path) -> Tuple[int, int, float]:
    with open(path, "rb") as fh:
        raw = fh.read(_SCAN_HEADER.size)
    return _parse_header(raw)


def _parse_header(raw: bytes) -> Tuple[int, int, float]:
    if len(raw) < _SCAN_HEADER.size:
        raise ScanFormatError("malformed header: file shorter than header")
    magic, version, c, t, dt = _SCAN_HEADER.unpack(raw[: _SCAN_HEADER.size])
    if magic != SCAN_MAGIC:
        raise ScanFormatError(f"malformed header: bad magic {magic!r}")
    if version != SCAN_VERSION:
        raise ScanFormatError(f"malformed header: unsupported version {version}")
    if c < 1 or t < 1 or not (math.isfinite(dt) and dt > 0):
        raise ScanFormatError(f"malformed header: C={c}, T={t}, dt={dt}")
    return c, t, dt


def load_scan(path, scan_id: Optional[str] = None, labels: Optional[Dict[str, int]] = None) -> ScanTimeSeries:
    raw = Path(path).read_bytes()
    c, t, dt = _parse_header(raw)
    body = raw[_SCAN_HEADER.size :]
    expected = c * t * 4
    if len(body) < expected:
        raise ScanFormatError(f"truncated payload: expected {c * t} values, found {len(body) // 4}")
    if len(body) > expected:
        raise ScanFormatError(f"malformed file: {len(body) - expected} trailing bytes")
    data = np.frombuffer(body, dtype="<f4").reshape(c, t).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ScanFormatError("non-finite entry in payload")
    return ScanTimeSeries(
        data=data,
        dt=dt,
        scan_id=Path(path).stem if scan_id is None else scan_id,
        labels=dict(labels or {}),
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def zscore_per_roi(scan: ScanTimeSeries) -> ScanTimeSeries:
    """Z-score every ROI with the population std.

    Zero-variance rows are set to zero and listed in ``degenerate``.
    """
    x = scan.data
    if x.shape[1] < 2:
        raise ValueError(f"z-scoring needs T >= 2, got T={x.shape[1]}")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    std = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    # rows that are constant up to rounding
    scale = np.maximum(np.abs(mean), 1.0)
    flat = (std[:, 0] <= 1e-12 * scale[:, 0])
    out = np.zeros_like(x)
    ok = ~flat
    out[ok] = centered[ok] / std[ok]
    return scan.replace(out, degenerate=tuple(int(i) for i in np.flatnonzero(flat)))


def resample_length(n_timepoints: int, dt: float, target_dt: float) -> int:
    return int(math.floor((n_timepoints - 1) * dt / target_dt + 1e-9)) + 1


def resample(scan: ScanTimeSeries, target_dt: float) -> ScanTimeSeries:
    """Downsample by linear interpolation at times ``k * target_dt``."""
    if not target_dt > 0:
        raise ValueError(f"target_dt must be positive, got {target_dt}")
    if target_dt < scan.dt:
        raise ValueError(f"only downsampling is supported: target_dt={target_dt} < dt={scan.dt}")
    if target_dt == scan.dt:
        return scan.replace(scan.data.copy())
    t_in = scan.n_timepoints
    t_out = resample_length(t_in, scan.dt, target_dt)
    pos = np.arange(t_out) * (target_dt / scan.dt)
    lo = np.minimum(np.floor(pos).astype(np.int64), t_in - 1)
    hi = np.minimum(lo + 1, t_in - 1)
    w = pos - lo
    x = scan.data
    out = x[:, lo] * (1.0 - w) + x[:, hi] * w
    return scan.replace(out, dt=target_dt)


def bandpass_array(x: np.ndarray, dt: float, lo: float, hi: float) -> np.ndarray:
    nyquist = 1.0 / (2.0 * dt)
    if not (0 <= lo < hi):
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    if hi >= nyquist:
        raise ValueError(f"hi={hi} Hz must be below the Nyquist frequency {nyquist} Hz")
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    freqs = np.fft.rfftfreq(n, d=dt)
    spec[..., (freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


def bandpass(scan: ScanTimeSeries, lo: float = DEFAULT_BAND[0], hi: float = DEFAULT_BAND[1]) -> ScanTimeSeries:
    """Ideal FFT bandpass applied to every ROI."""
    return scan.replace(bandpass_array(scan.data, scan.dt, lo, hi))


@dataclass
class PreprocessConfig:
    order: Tuple[str, ...] = PREPROCESS_STEPS
    band: Tuple[float, float] = DEFAULT_BAND
    target_dt: float = 2.0

    def __post_init__(self):
        self.order = tuple(self.order)
        self.band = tuple(self.band)
        unknown = set(self.order) - set(PREPROCESS_STEPS)
        if unknown:
            raise ValueError(f"unknown preprocessing steps: {sorted(unknown)}")


def preprocess(scan: ScanTimeSeries, cfg: Optional[PreprocessConfig] = None) -> ScanTimeSeries:
    cfg = cfg or PreprocessConfig()
    for step in cfg.order:
        if step == "bandpass":
            scan = bandpass(scan, *cfg.band)
        elif step == "resample":
            if scan.dt < cfg.target_dt:
                scan = resample(scan, cfg.target_dt)
            elif scan.dt > cfg.target_dt:
                raise ValueError(f"scan {scan.scan_id!r} has dt={scan.dt} > target {cfg.target_dt}")
        elif step == "zscore":
            scan = zscore_per_roi(scan)
    return scan


# ---------------------------------------------------------------------------
# Atlas
# ---------------------------------------------------------------------------


@dataclass
class AtlasMapping:
    roi_network: np.ndarray
    network_names: List[str]

    def __post_init__(self):
        self.roi_network = np.asarray(self.roi_network, dtype=np.int64)
        self.network_names = [str(n) for n in self.network_names]
        n = len(self.network_names)
        if self.roi_network.ndim != 1 or self.roi_network.size == 0:
            raise AtlasError("roi_network must be a non-empty 1-d array")
        bad = (self.roi_network < 0) | (self.roi_network >= n)
        if bad.any():
            roi = int(np.flatnonzero(bad)[0])
            raise AtlasError(f"ROI {roi} has network id {self.roi_network[roi]} outside [0, {n})")
        counts = np.bincount(self.roi_network, minlength=n)
        if (counts == 0).any():
            raise AtlasError(f"empty network(s): {[self.network_names[i] for i in np.flatnonzero(counts == 0)]}")

    @property
    def n_networks(self) -> int:
        return len(self.network_names)

    @property
    def n_rois(self) -> int:
        return int(self.roi_network.size)

    def counts(self) -> np.ndarray:
        return np.bincount(self.roi_network, minlength=self.n_networks)

    def members(self, network: int) -> np.ndarray:
        return np.flatnonzero(self.roi_network == network)

    def to_json(self) -> dict:
        return {
            "n_networks": self.n_networks,
            "network_names": list(self.network_names),
            "roi_network": [int(v) for v in self.roi_network],
        }

    def __eq__(self, other):
        if not isinstance(other, AtlasMapping):
            return NotImplemented
        return self.network_names == other.network_names and np.array_equal(self.roi_network, other.roi_network)


def atlas_from_json(obj: dict) -> AtlasMapping:
    try:
        n = int(obj["n_networks"])
        names = list(obj["network_names"])
        roi_network = list(obj["roi_network"])
    except (KeyError, TypeError) as exc:
        raise AtlasError(f"malformed atlas JSON: {exc}") from exc
    if len(names) != n:
        raise AtlasError(f"n_networks={n} but {len(names)} network names")
    return AtlasMapping(np.asarray(roi_network, dtype=np.int64), names)


def load_atlas(path) -> AtlasMapping:
    with open(path) as fh:
        return atlas_from_json(json.load(fh))


def write_atlas(atlas: AtlasMapping, path) -> None:
    with open(path, "w") as fh:
        json.dump(atlas.to_json(), fh)
        fh.write("\n")


def default_atlas() -> AtlasMapping:
    """Schaefer-400 (Yeo-7) + Tian-III subcortex + Buckner-7 cerebellum, 457 ROIs."""
    text = resources.files("semantoks.data").joinpath("default_atlas.json").read_text()
    return atlas_from_json(json.loads(text))


def block_atlas(counts: Sequence[int], names: Optional[Sequence[str]] = None) -> AtlasMapping:
    """Atlas with contiguous ROI blocks of the given sizes."""
    roi_network = np.repeat(np.arange(len(counts)), counts)
    names = list(names) if names is not None else [f"net{i}" for i in range(len(counts))]
    return AtlasMapping(roi_network, names)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    scan_id: str
    path: Path
    labels: Dict[str, int]


@dataclass
class DatasetManifest:
    scans: List[ManifestEntry]
    dt: float
    n_rois: int
    atlas_path: Optional[Path] = None
    path: Optional[Path] = None

    def __len__(self):
        return len(self.scans)

    def load_scans(self, preprocess_cfg: Optional[PreprocessConfig] = None) -> List[ScanTimeSeries]:
        out = []
        for entry in self.scans:
            scan = load_scan(entry.path, scan_id=entry.scan_id, labels=entry.labels)
            if preprocess_cfg is not None:
                scan = preprocess(scan, preprocess_cfg)
            out.append(scan)
        return out

    def labels(self, name: str) -> np.ndarray:
        missing = [e.scan_id for e in self.scans if name not in e.labels]
        if missing:
            raise KeyError(f"label {name!r} absent for {len(missing)} scan(s), e.g. {missing[0]!r}")
        return np.array([e.labels[name] for e in self.scans], dtype=np.int64)

    def load_atlas(self) -> AtlasMapping:
        return load_atlas(self.atlas_path) if self.atlas_path is not None else default_atlas()


def write_manifest(entries: Sequence[ManifestEntry], path, base_dir=None) -> None:
    base = Path(base_dir) if base_dir is not None else Path(path).parent
    rows = []
    for e in entries:
        p = Path(e.path)
        try:
            rel = os.path.relpath(p, base)
        except ValueError:
            rel = str(p)
        rows.append({"scan_id": e.scan_id, "path": rel, "labels": {k: int(v) for k, v in sorted(e.labels.items())}})
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")


def load_manifest(path, atlas_path=None) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise ValueError(f"manifest {path} must be a JSON list")
    entries = []
    for row in rows:
        p = Path(row["path"])
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise FileNotFoundError(f"manifest entry {row['scan_id']!r}: {p} does not exist")
        entries.append(ManifestEntry(str(row["scan_id"]), p, {k: int(v) for k, v in row.get("labels", {}).items()}))
    if not entries:
        raise ValueError(f"manifest {path} lists no scans")
    shapes = {read_scan_header(e.path)[0::2] for e in entries}
    if len(shapes) != 1:
        raise ValueError(f"manifest scans disagree on (C, dt): {sorted(shapes)}")
    (c, dt), = shapes
    if atlas_path is None and (path.parent / "atlas.json").exists():
        atlas_path = path.parent / "atlas.json"
    return DatasetManifest(entries, dt=dt, n_rois=c, atlas_path=Path(atlas_path) if atlas_path else None, path=path)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_scans: int = 300
    n_rois: int = 457
    n_timepoints: int = 180
    dt: float = 2.0
    n_classes: int = 3
    effect_size: float = 2.0
    label_networks: Tuple[int, ...] = (2, 6)
    label_name: str = "label"
    base_coupling: float = 1.0
    coupling_jitter: float = 0.15
    noise_std: float = 1.0

    def __post_init__(self):
        self.label_networks = tuple(int(n) for n in self.label_networks)
        if self.effect_size < 0:
            raise ValueError(f"effect_size must be >= 0, got {self.effect_size}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_scans < 1 or self.n_timepoints < 2:
            raise ValueError("n_scans >= 1 and n_timepoints >= 2 required")


def _band_limited_noise(rng: np.random.Generator, shape, dt: float) -> np.ndarray:
    x = bandpass_array(rng.standard_normal(shape), dt, *DEFAULT_BAND)
    std = x.std(axis=-1, keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def planted_couplings(cfg: SynthConfig, n_networks: int, label: int, rng: np.random.Generator) -> np.ndarray:
    """Per-network latent coupling of one scan; the label shifts the designated networks.

    Couplings are log-normal around ``base_coupling`` (``coupling_jitter`` is the
    std of the natural log). In the designated networks the label adds
    ``effect_size * (label - (K-1)/2) / (K-1)`` to the log2 coupling, so the
    extreme classes differ by a factor of ``2 ** effect_size``.
    """
    log_a = cfg.coupling_jitter * rng.standard_normal(n_networks)
    shift = cfg.effect_size * (label - (cfg.n_classes - 1) / 2.0) / (cfg.n_classes - 1)
    for n in cfg.label_networks:
        log_a[n] += shift * math.log(2.0)
    return cfg.base_coupling * np.exp(log_a)


def synthesize_scans(cfg: SynthConfig, seed: int, atlas: Optional[AtlasMapping] = None) -> List[ScanTimeSeries]:
    """Generate scans in memory; a pure function of ``(cfg, seed, atlas)``.

    Each ROI mixes the band-limited latent of its network, weighted by a
    per-scan network coupling, with white ROI noise.
    """
    atlas = atlas or default_atlas()
    if atlas.n_rois != cfg.n_rois:
        raise ValueError(f"atlas has {atlas.n_rois} ROIs but config asks for {cfg.n_rois}")
    for n in cfg.label_networks:
        if not 0 <= n < atlas.n_networks:
            raise ValueError(f"label network {n} outside [0, {atlas.n_networks})")
    base_rng = np.random.default_rng([seed, 0])
    loadings = base_rng.uniform(0.5, 1.5, size=cfg.n_rois)
    labels = np.arange(cfg.n_scans) % cfg.n_classes
    base_rng.shuffle(labels)
    scans = []
    for i in range(cfg.n_scans):
        rng = np.random.default_rng([seed, 1, i])
        label = int(labels[i])
        coupling = planted_couplings(cfg, atlas.n_networks, label, rng)
        latents = _band_limited_noise(rng, (atlas.n_networks, cfg.n_timepoints), cfg.dt)
        roi_gain = (coupling[atlas.roi_network] * loadings)[:, None]
        noise = cfg.noise_std * rng.standard_normal((cfg.n_rois, cfg.n_timepoints))
        data = roi_gain * latents[atlas.roi_network] + noise
        scans.append(
            ScanTimeSeries(data=data, dt=cfg.dt, scan_id=f"scan_{i:05d}", labels={cfg.label_name: label})
        )
    return scans


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir, atlas: Optional[AtlasMapping] = None) -> DatasetManifest:
    """Write a synthetic dataset (scans, ``atlas.json``, ``manifest.json``) to ``out_dir``."""
    out_dir = Path(out_dir)
    scan_dir = out_dir / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    atlas = atlas or default_atlas()
    write_atlas(atlas, out_dir / "atlas.json")
    entries = []
    for scan in synthesize_scans(cfg, seed, atlas):
        path = scan_dir / f"{scan.scan_id}.bstk"
        write_scan(scan, path)
        entries.append(ManifestEntry(scan.scan_id, path, scan.labels))
    write_manifest(entries, out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")
