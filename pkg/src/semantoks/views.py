"""Temporal views, corruption augmentations and slice masks.

Every function takes an explicit ``numpy.random.Generator`` and consumes it in
a documented order, so a caller holding the same seed can replay the draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import DEFAULT_BAND, AtlasMapping, ScanTimeSeries

MASK_STRATEGIES = ("slice", "network", "temporal", "random", "block")

PHYSIO_PRESETS = {
    "roi_mix": {"light": {"p_rois": 0.1}, "heavy": {"p_rois": 0.2}},
    "freq_mask": {"light": {"s_min": 0.8}, "heavy": {"s_min": 0.6}},
    "band_noise": {"light": {"sigma_max": 0.1}, "heavy": {"sigma_max": 0.2}},
}


@dataclass
class View:
    data: np.ndarray
    scan_id: str = ""
    start: int = 0
    dt: float = 2.0

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]

    def replace(self, data: np.ndarray) -> "View":
        return View(data=data, scan_id=self.scan_id, start=self.start, dt=self.dt)


@dataclass
class AugParams:
    tau_c_max: float = 0.1
    tau_t_max: float = 0.3
    tau_sigma: float = 0.1
    tau_s_range: Tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        self.tau_s_range = tuple(float(v) for v in self.tau_s_range)
        for name in ("tau_c_max", "tau_t_max", "tau_sigma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.tau_s_range
        if not (0.0 < lo <= hi <= 2.0):
            raise ValueError(f"tau_s_range must be a sub-range of (0, 2], got {self.tau_s_range}")


@dataclass
class MaskGrid:
    bits: np.ndarray
    strategy: str
    target_ratio: float = float("nan")

    @property
    def ratio(self) -> float:
        return float(self.bits.mean())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape


def sample_views(scan: ScanTimeSeries, t_crop: int, rng: np.random.Generator) -> Tuple[View, View]:
    """Two independent uniform crops of length ``t_crop``; they may overlap."""
    t = scan.n_timepoints
    if t < t_crop:
        raise ValueError(f"scan {scan.scan_id!r} has T={t} < T_crop={t_crop}")
    starts = rng.integers(0, t - t_crop + 1, size=2)
    return tuple(
        View(scan.data[:, s : s + t_crop].copy(), scan.scan_id, int(s), scan.dt) for s in starts
    )


def crop(scan: ScanTimeSeries, start: int, t_crop: int) -> View:
    return View(scan.data[:, start : start + t_crop].copy(), scan.scan_id, int(start), scan.dt)


def corrupt(view: View, params: AugParams, rng: np.random.Generator) -> View:
    """Zero channels and a timepoint block, add noise, then rescale.

    Draw order: tau_c, tau_t, tau_s, zeroed channels, block start, noise.
    """
    x = view.data.copy()
    c, t = x.shape
    tau_c = rng.uniform(0.0, params.tau_c_max)
    tau_t = rng.uniform(0.0, params.tau_t_max)
    tau_s = rng.uniform(*params.tau_s_range)
    n_chan = int(math.floor(tau_c * c))
    n_time = int(math.floor(tau_t * t))
    channels = rng.choice(c, size=n_chan, replace=False)
    start = int(rng.integers(0, t - n_time + 1))
    x[channels, :] = 0.0
    x[:, start : start + n_time] = 0.0
    x = x + rng.normal(0.0, params.tau_sigma, size=x.shape)
    return view.replace(x * tau_s)


def ring_adjacency(atlas: AtlasMapping) -> List[np.ndarray]:
    """Each ROI neighbours its predecessor and successor within its own network (cyclic)."""
    adjacency: List[np.ndarray] = [np.empty(0, dtype=np.int64)] * atlas.n_rois
    for n in range(atlas.n_networks):
        members = atlas.members(n)
        m = len(members)
        for j, roi in enumerate(members):
            nbrs = {members[(j - 1) % m], members[(j + 1) % m]} - {roi}
            adjacency[roi] = np.array(sorted(nbrs), dtype=np.int64)
    return adjacency


def augment_physio(
    view: View,
    kind: str,
    intensity: str = "light",
    rng: Optional[np.random.Generator] = None,
    adjacency: Optional[Sequence[np.ndarray]] = None,
    **overrides,
) -> View:
    """Physiologically motivated augmentations: ``roi_mix``, ``freq_mask``, ``band_noise``.

    ``overrides`` replace the intensity preset (``p_rois``, ``s_min``, ``sigma_max``).
    """
    if kind not in PHYSIO_PRESETS:
        raise ValueError(f"unknown physiological augmentation {kind!r}")
    if intensity not in ("light", "heavy"):
        raise ValueError(f"intensity must be 'light' or 'heavy', got {intensity!r}")
    rng = rng if rng is not None else np.random.default_rng()
    opts = dict(PHYSIO_PRESETS[kind][intensity], **overrides)
    x = view.data
    c, t = x.shape

    if kind == "roi_mix":
        if adjacency is None:
            raise ValueError("roi_mix requires an ROI adjacency structure")
        n_mix = int(math.floor(opts["p_rois"] * c))
        rois = rng.choice(c, size=n_mix, replace=False)
        alphas = rng.uniform(0.7, 0.95, size=n_mix)
        out = x.copy()
        for roi, alpha in zip(rois, alphas):
            nbrs = adjacency[roi]
            if len(nbrs) == 0:
                continue
            nb = nbrs[rng.integers(0, len(nbrs))]
            out[roi] = alpha * x[roi] + (1.0 - alpha) * x[nb]
        return view.replace(out)

    if kind == "freq_mask":
        spec = np.fft.rfft(x, axis=1)
        freqs = np.fft.rfftfreq(t, d=view.dt)
        band = np.flatnonzero((freqs >= DEFAULT_BAND[0]) & (freqs <= DEFAULT_BAND[1]))
        p_mask = rng.uniform(0.1, 0.3, size=c)
        hit = rng.random((c, band.size)) < p_mask[:, None]
        scale = rng.uniform(opts["s_min"], 1.0, size=(c, band.size))
        spec[:, band] *= np.where(hit, scale, 1.0)
        return view.replace(np.fft.irfft(spec, n=t, axis=1))

    # band_noise
    times = np.arange(t) * view.dt
    sigma = rng.uniform(0.0, opts["sigma_max"], size=c)
    n_comp = rng.integers(1, 3, size=c)
    noise = np.zeros_like(x)
    for roi in range(c):
        k = n_comp[roi]
        amp = rng.uniform(0.5, 1.5, size=k) * sigma[roi]
        freq = rng.uniform(DEFAULT_BAND[0], DEFAULT_BAND[1], size=k)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=k)
        noise[roi] = np.sum(amp[:, None] * np.sin(2.0 * np.pi * freq[:, None] * times + phase[:, None]), axis=0)
    return view.replace(x + noise)


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp(k: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, k))


def sample_mask(
    n_rows: int,
    n_patches: int,
    ratio_range: Sequence[float],
    strategy: str,
    rng: np.random.Generator,
) -> MaskGrid:
    """Sample an N x P student mask; ``True`` marks a masked token.

    At least one token is always masked and at least one left visible.
    """
    lo, hi = (float(v) for v in ratio_range)
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"invalid mask ratio range {ratio_range}")
    if strategy not in MASK_STRATEGIES:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    n, p = n_rows, n_patches
    if n * p < 2:
        raise ValueError(f"mask grid {n}x{p} needs at least two cells")
    r = rng.uniform(lo, hi)
    bits = np.zeros((n, p), dtype=bool)

    if strategy == "slice":
        if n < 2:
            strategy = "temporal"
        elif p < 2:
            strategy = "network"
        else:
            strategy = "network" if rng.random() < 0.5 else "temporal"
        tag = f"{strategy}-slice"
    else:
        tag = strategy

    if strategy == "network":
        if n < 2:
            raise ValueError("network slicing needs at least two networks")
        k = _clamp(_round(r * n), 1, n - 1)
        bits[rng.choice(n, size=k, replace=False), :] = True
    elif strategy == "temporal":
        if p < 2:
            raise ValueError("temporal slicing needs at least two patches")
        k = _clamp(_round(r * p), 1, p - 1)
        start = int(rng.integers(0, p - k + 1))
        bits[:, start : start + k] = True
    elif strategy == "random":
        k = _clamp(int(math.floor(r * n * p)), 1, n * p - 1)
        bits.flat[rng.choice(n * p, size=k, replace=False)] = True
    else:  # block
        target = r * n * p
        shapes = [(h, w) for h in range(1, n + 1) for w in range(1, p + 1) if (h, w) != (n, p)]
        best = min(abs(h * w - target) for h, w in shapes)
        candidates = [s for s in shapes if abs(s[0] * s[1] - target) == best]
        h, w = candidates[int(rng.integers(0, len(candidates)))]
        top = int(rng.integers(0, n - h + 1))
        left = int(rng.integers(0, p - w + 1))
        bits[top : top + h, left : left + w] = True
    return MaskGrid(bits, tag, r)


def expand_mask(bits: np.ndarray, row_network: np.ndarray) -> np.ndarray:
    """Lift a network-level mask to a finer row grid (e.g. one row per ROI)."""
    return np.asarray(bits)[np.asarray(row_network)]
