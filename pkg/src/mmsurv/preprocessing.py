"""Per-modality preprocessing and survival-time discretization.

RNA, methylation, tile, and volume routines operate on arrays the caller
already extracted from source files; slide decoding and probe-level QC are
upstream concerns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DNAM_CLAMP_TOL = 1e-6
OTSU_BINS = 256


@dataclass(frozen=True)
class TileScore:
    tile_index: int
    hsv_score: float
    tissue_fraction: float


def rna_preprocess(raw: np.ndarray) -> np.ndarray:
    """log(1+x) then per-subject standardization to mean 0 / std 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.min() < 0:
        raise ValueError("negative expression value")
    out = np.log1p(raw)
    std = out.std()
    if std == 0.0:
        raise ValueError("constant expression vector")
    return (out - out.mean()) / std


def dnam_preprocess(raw: np.ndarray) -> np.ndarray:
    """Validate beta values, clamping tiny numeric overshoot back into [0,1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.min() < -DNAM_CLAMP_TOL or raw.max() > 1.0 + DNAM_CLAMP_TOL:
        raise ValueError("beta value out of [0,1]")
    return np.clip(raw, 0.0, 1.0)


def _zscore_nonzero(volume: np.ndarray) -> np.ndarray:
    nz = volume != 0
    vals = volume[nz]
    if vals.size == 0 or vals.std() == 0.0:
        raise ValueError("degenerate volume: no intensity variation")
    out = volume.copy()
    out[nz] = (vals - vals.mean()) / vals.std()
    return out


def mri_prepare(volume: np.ndarray, tumor_mask: np.ndarray, out_side: int = 64) -> np.ndarray:
    """Crop the tumor bounding cube and normalize to an out_side**3 volume.

    The mask's bounding box is expanded to a cube centered on it (clipped to
    the volume). Cubes larger than the target are trilinearly resampled
    down; smaller ones are zero-padded symmetrically. Intensities are
    z-scored over nonzero voxels so padding stays neutral.
    """
    volume = np.asarray(volume, dtype=np.float64)
    tumor_mask = np.asarray(tumor_mask, dtype=bool)
    if volume.shape != tumor_mask.shape:
        raise ValueError("volume and mask shapes differ")
    if not tumor_mask.any():
        raise ValueError("no tumor voxels")

    idx = np.nonzero(tumor_mask)
    lo = np.array([a.min() for a in idx])
    hi = np.array([a.max() + 1 for a in idx])
    side = int((hi - lo).max())
    starts = []
    for d in range(3):
        center = (lo[d] + hi[d]) / 2.0
        start = int(round(center - side / 2.0))
        start = max(0, min(start, volume.shape[d] - side))
        if volume.shape[d] < side:
            start = 0
        starts.append(start)
    stops = [min(s + side, volume.shape[d]) for d, s in enumerate(starts)]
    cube = volume[starts[0]:stops[0], starts[1]:stops[1], starts[2]:stops[2]]

    if max(cube.shape) > out_side:
        # align-corners trilinear resample onto the target grid
        coords = np.meshgrid(
            *[np.linspace(0, s - 1, out_side) for s in cube.shape], indexing="ij"
        )
        cube = ndimage.map_coordinates(cube, np.stack(coords), order=1, mode="nearest")
    if cube.shape != (out_side,) * 3:
        out = np.zeros((out_side,) * 3, dtype=np.float64)
        offs = [(out_side - s) // 2 for s in cube.shape]
        out[
            offs[0]:offs[0] + cube.shape[0],
            offs[1]:offs[1] + cube.shape[1],
            offs[2]:offs[2] + cube.shape[2],
        ] = cube
        cube = out
    return _zscore_nonzero(cube)


def otsu_threshold(gray: np.ndarray) -> float:
    """Threshold maximizing between-class variance over a 256-bin histogram."""
    gray = np.asarray(gray, dtype=np.float64).ravel()
    vmin, vmax = gray.min(), gray.max()
    if vmin == vmax:
        raise ValueError("constant image has no threshold")
    counts, edges = np.histogram(gray, bins=OTSU_BINS, range=(vmin, vmax))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = counts / counts.sum()
    mu = w * centers
    w0 = np.cumsum(w)
    m0 = np.cumsum(mu)
    m_total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        variance = (m_total * w0 - m0) ** 2 / (w0 * (1.0 - w0))
    variance[~np.isfinite(variance)] = 0.0
    k = int(np.argmax(variance))
    return float(edges[k + 1])


def _saturation(tile: np.ndarray) -> np.ndarray:
    cmax = tile.max(axis=-1)
    cmin = tile.min(axis=-1)
    sat = np.zeros_like(cmax)
    nz = cmax > 0
    sat[nz] = (cmax[nz] - cmin[nz]) / cmax[nz]
    return sat


def score_tile(tile: np.ndarray, tile_index: int = 0) -> TileScore:
    """Saturation-times-tissue score; tissue = pixels darker than Otsu cut."""
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim != 3:
        raise ValueError("tile must be H x W x C")
    gray = tile.mean(axis=-1)
    if gray.min() == gray.max():
        tissue_fraction = 0.0
    else:
        thr = otsu_threshold(gray)
        tissue_fraction = float(np.mean(gray < thr))
    sat = float(_saturation(tile).mean())
    return TileScore(tile_index=tile_index, hsv_score=sat * tissue_fraction,
                     tissue_fraction=tissue_fraction)


def select_wsi_tiles(candidates: list[np.ndarray], n_keep: int) -> list[int]:
    """Indices of the n_keep highest-scoring tiles, ties to the lower index."""
    if not candidates:
        raise ValueError("no candidate tiles")
    if n_keep > len(candidates):
        raise ValueError(f"n_keep={n_keep} exceeds {len(candidates)} candidates")
    scores = np.array([score_tile(t, i).hsv_score for i, t in enumerate(candidates)])
    order = np.lexsort((np.arange(len(scores)), -scores))
    return sorted(int(i) for i in order[:n_keep])


def clinical_encode(radiation: bool, pharma: bool, age: float,
                    age_mean: float, age_std: float) -> np.ndarray:
    if age_std <= 0:
        raise ValueError("age_std must be positive")
    return np.array([float(radiation), float(pharma), (age - age_mean) / age_std])


def discretize_times(times, num_bins: int) -> np.ndarray:
    """Quantile bin edges (num_bins+1 values) over observed follow-up times.

    Accepts raw times or SurvivalLabel objects.
    """
    times = [getattr(t, "time", t) for t in times]
    times = np.asarray(times, dtype=np.float64)
    if num_bins < 1:
        raise ValueError("need at least one interval")
    if np.unique(times).size < num_bins:
        raise ValueError(
            f"only {np.unique(times).size} distinct times; reduce the interval count"
        )
    edges = np.quantile(times, np.linspace(0.0, 1.0, num_bins + 1))
    if np.any(np.diff(edges) <= 0) and num_bins > 1:
        raise ValueError("duplicate quantile edges; reduce the interval count")
    return edges


def interval_index(time: float | np.ndarray, edges: np.ndarray) -> np.ndarray:
    """1-based interval of each time; out-of-range times clamp to 1 or T."""
    t = np.asarray(time, dtype=np.float64)
    inner = np.asarray(edges, dtype=np.float64)[1:-1]
    return (np.searchsorted(inner, t, side="left") + 1).astype(int)
