"""Two-pass threshold/morphology brain extraction.

Pass 1 thresholds a 3x3x3 median-filtered copy of the bias-corrected volume
inside its robust intensity range, opens the result to cut thin bright bridges (noisy CSF touching the
scalp), keeps the largest 26-connected component, grows it into the adjacent
dark tissue (CSF) that lies between it and the scalp, then closes and fills
holes. Pass 2 re-seeds on the center of gravity of the pass-1 tissue: voxels
farther than the refinement radius are discarded, and the largest component
is re-selected, re-closed and re-filled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyInputError, ExtractionError, ParameterError, ShapeError
from .volume import Volume3D

CONN26 = np.ones((3, 3, 3), dtype=bool)
CONN6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ExtractParams:
    frac: float = 0.10
    percentiles: tuple[float, float] = (2.0, 98.0)
    closing_radius: int = 2
    cog_radius_factor: float = 1.4
    opening_radius: int = 1
    csf_grow_mm: float = 15.0
    median_prefilter: bool = True

    def __post_init__(self):
        if not 0 < self.frac < 1:
            raise ParameterError("frac must lie in (0, 1)")
        if self.closing_radius < 1:
            raise ParameterError("closing radius must be >= 1")
        if self.opening_radius < 0 or self.csf_grow_mm < 0 or self.cog_radius_factor <= 0:
            raise ParameterError(f"invalid extraction parameters: {self}")


def robust_intensity_range(vol: Volume3D, percentiles=(2.0, 98.0)) -> tuple[float, float]:
    """Low/high percentiles of the nonzero voxel intensities."""
    data = np.asarray(vol.data)
    values = data[data != 0]
    if values.size == 0:
        raise EmptyInputError("volume has no nonzero voxels")
    lo, hi = np.percentile(values, percentiles)
    return float(lo), float(hi)


def center_of_gravity(vol: Volume3D, mask: np.ndarray) -> tuple[float, float, float]:
    """Intensity-weighted centroid of the masked voxels, in voxel coordinates.

    Falls back to the unweighted centroid when the masked intensities sum to
    zero or less.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.shape:
        raise ShapeError("mask and volume shapes differ")
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise EmptyInputError("mask is empty")
    w = np.asarray(vol.data, dtype=np.float64)[mask]
    if w.sum() <= 0:
        w = np.ones_like(w)
    return tuple(float(c) for c in (idx * w[:, None]).sum(axis=0) / w.sum())


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.indices((2 * r + 1,) * 3) - r
    return (g ** 2).sum(axis=0) <= r * r


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 26-connected component; ties go to the smallest first linear index."""
    labels, n = ndimage.label(mask, structure=CONN26)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    best = np.flatnonzero(sizes == sizes.max())
    # ndimage.label numbers components in order of first (C-order) voxel, so
    # the lowest label among equals has the smallest minimum linear index
    return labels == best[0] + 1


def _close_and_fill(mask: np.ndarray, radius: int) -> np.ndarray:
    pad = radius + 1
    padded = np.pad(mask, pad)
    closed = ndimage.binary_closing(padded, structure=ball(radius))[pad:-pad, pad:-pad, pad:-pad]
    return ndimage.binary_fill_holes(closed | mask, structure=CONN6)


def _grow_into(seed: np.ndarray, allowed: np.ndarray, steps: int) -> np.ndarray:
    """Geodesic dilation of ``seed`` inside ``allowed`` for at most ``steps`` voxels."""
    grown = seed.copy()
    for _ in range(steps):
        nxt = ndimage.binary_dilation(grown, structure=CONN26) & (allowed | grown)
        if np.array_equal(nxt, grown):
            break
        grown = nxt
    return grown


def _pass1(data: np.ndarray, spacing, params: ExtractParams) -> np.ndarray:
    vol_lo, vol_hi = np.percentile(data[data != 0], params.percentiles)
    threshold = vol_lo + params.frac * (vol_hi - vol_lo)
    bright = data > threshold
    if not bright.any():
        raise ExtractionError("no voxels above the extraction threshold")
    core = bright
    if params.opening_radius > 0:
        core = ndimage.binary_opening(bright, structure=ball(params.opening_radius))
        if not core.any():
            core = bright
    core = largest_component(core)
    if params.opening_radius > 0:
        core = ndimage.binary_dilation(core, structure=ball(params.opening_radius)) & bright
    # dark tissue: positive but below threshold, i.e. CSF between brain and scalp
    dark = (data > 0.5 * max(vol_lo, 0.0)) & ~bright
    steps = int(round(params.csf_grow_mm / min(spacing)))
    grown = _grow_into(core, dark, steps)
    return _close_and_fill(grown, params.closing_radius)


def extract_brain_passes(vol: Volume3D, params: ExtractParams | None = None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Both pass masks ``(pass1, pass2)``; :func:`extract_brain` returns the second."""
    params = params or ExtractParams()
    data = np.asarray(vol.data, dtype=np.float64)
    if not (data != 0).any():
        raise EmptyInputError("volume has no nonzero voxels")
    if params.median_prefilter:
        # masks are built on a denoised copy; the output keeps original intensities
        data = ndimage.median_filter(data, size=3)
        if not (data != 0).any():
            data = np.asarray(vol.data, dtype=np.float64)
    first = _pass1(data, vol.spacing, params)
    if not first.any():
        raise ExtractionError("pass 1 produced an empty mask")

    cog = np.asarray(center_of_gravity(vol, first))
    n = int(first.sum())
    radius_mm = params.cog_radius_factor * (3.0 * n * float(np.prod(vol.spacing)) / (4.0 * np.pi)) ** (1 / 3)
    grid = np.indices(vol.shape, dtype=np.float64)
    dist2 = sum(((grid[a] - cog[a]) * vol.spacing[a]) ** 2 for a in range(3))
    second = largest_component(first & (dist2 <= radius_mm ** 2))
    if not second.any():
        raise ExtractionError("pass 2 produced an empty mask")
    second = _close_and_fill(second, params.closing_radius)
    return first, second


def extract_brain(vol: Volume3D, params: ExtractParams | None = None) -> tuple[np.ndarray, Volume3D]:
    """Binary brain mask and the volume with every non-brain voxel set to 0."""
    _, mask = extract_brain_passes(vol, params)
    stripped = np.where(mask, np.asarray(vol.data), np.float32(0))
    return mask, vol.with_data(stripped)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * (a & b).sum() / denom)
