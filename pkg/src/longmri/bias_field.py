"""Log-domain estimation and removal of a smooth multiplicative bias field.

The observed image is modeled as ``v = u * f`` so ``log v = log u + log f``.
Each iteration labels the current corrected log image by 1-D k-means, takes
the class centers as the piecewise-constant tissue estimate, and fits a cubic
B-spline on a regular control grid to what is left over. The fitted residual
is accumulated into the log field until the multiplicative update becomes
flat (small coefficient of variation).

N4's histogram-deconvolution sharpening is not used; the k-means tissue
estimate plus a coarse-to-fine control grid plays its role.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, ndimage

from .errors import EmptyInputError, ParameterError, ShapeError
from .volume import Volume3D

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class BiasField:
    """Strictly positive multiplicative field on a volume's grid."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    converged: bool = True
    n_iter: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ShapeError("bias field must be 3-D")
        if not np.all(values > 0):
            raise ParameterError("bias field values must be strictly positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.values.shape

    @property
    def log(self) -> np.ndarray:
        return np.log(self.values)

    def as_volume(self) -> Volume3D:
        return Volume3D(self.values.astype(np.float32), self.spacing, intensity_units="bias")


@dataclass(frozen=True)
class BiasParams:
    control_spacing_mm: float = 40.0
    max_iter: int = 50
    tol: float = 1e-3
    smoothing_passes: int = 1
    n_classes: int = 4
    damping: float = 1e-6

    def validate(self, spacing) -> None:
        if self.control_spacing_mm <= 2 * max(spacing):
            raise ParameterError("control spacing must exceed twice the largest voxel spacing")
        if self.tol <= 0 or self.max_iter < 1 or self.smoothing_passes < 1 or self.n_classes < 1:
            raise ParameterError(f"invalid bias parameters: {self}")


def bspline_basis(n: int, spacing: float, control_spacing: float) -> np.ndarray:
    """Dense ``(n, n_ctrl)`` uniform cubic B-spline design matrix for one axis.

    The knot spacing is stretched so an integer number of spans covers the
    axis exactly; ``n_ctrl = spans + 3``.
    """
    length = (n - 1) * spacing
    spans = max(1, int(math.ceil(length / control_spacing)))
    t = np.arange(n) * spacing / (length / spans) if length > 0 else np.zeros(n)
    j = np.minimum(np.floor(t).astype(int), spans - 1)
    u = t - j
    w = np.stack([
        (1 - u) ** 3 / 6,
        (3 * u**3 - 6 * u**2 + 4) / 6,
        (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6,
        u**3 / 6,
    ], axis=1)
    B = np.zeros((n, spans + 3))
    rows = np.arange(n)
    for k in range(4):
        B[rows, j + k] = w[:, k]
    return B


class SplineFitter:
    """Weighted tensor-product cubic B-spline least squares on a fixed grid.

    The normal matrix is contracted one axis at a time, so no dense design
    matrix over all voxels is ever formed.
    """

    def __init__(self, shape, spacing, control_spacing: float, weights: np.ndarray, damping: float = 1e-6):
        self.B = [bspline_basis(n, s, control_spacing) for n, s in zip(shape, spacing)]
        Bx, By, Bz = self.B
        W = np.asarray(weights, dtype=np.float64)
        self.W = W
        T = np.einsum("xa,xd,xyz->adyz", Bx, Bx, W, optimize=True)
        T = np.einsum("adyz,yb,ye->adbez", T, By, By, optimize=True)
        T = np.einsum("adbez,zc,zf->abcdef", T, Bz, Bz, optimize=True)
        m = Bx.shape[1] * By.shape[1] * Bz.shape[1]
        M = T.reshape(m, m)
        lam = damping * max(np.trace(M) / m, 1e-300)
        self.cho = linalg.cho_factor(M + lam * np.eye(m))
        self.ctrl_shape = (Bx.shape[1], By.shape[1], Bz.shape[1])

    def fit(self, values: np.ndarray) -> np.ndarray:
        """Coefficients minimizing the weighted squared error to ``values``."""
        Bx, By, Bz = self.B
        rhs = np.einsum("xa,yb,zc,xyz->abc", Bx, By, Bz, self.W * values, optimize=True)
        return linalg.cho_solve(self.cho, rhs.ravel()).reshape(self.ctrl_shape)

    def evaluate(self, coef: np.ndarray) -> np.ndarray:
        Bx, By, Bz = self.B
        return np.einsum("xa,yb,zc,abc->xyz", Bx, By, Bz, coef, optimize=True)

    def smooth(self, values: np.ndarray) -> np.ndarray:
        return self.evaluate(self.fit(values))


def _kmeans_1d(x: np.ndarray, centers: np.ndarray, steps: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """A few Lloyd iterations on scalar data; returns ``(labels, centers)``."""
    centers = np.sort(np.asarray(centers, dtype=np.float64))
    for _ in range(steps):
        edges = 0.5 * (centers[1:] + centers[:-1])
        labels = np.searchsorted(edges, x)
        sums = np.bincount(labels, weights=x, minlength=centers.size)
        counts = np.bincount(labels, minlength=centers.size)
        centers = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        centers = np.sort(centers)
    edges = 0.5 * (centers[1:] + centers[:-1])
    return np.searchsorted(edges, x), centers


def _masked_median(L: np.ndarray, sel: np.ndarray) -> np.ndarray:
    """3x3x3 median where the whole neighborhood lies inside ``sel``; identity elsewhere."""
    interior = ndimage.binary_erosion(sel, structure=np.ones((3, 3, 3), dtype=bool))
    return np.where(interior, ndimage.median_filter(L, size=3), L)


def field_update_cv(prev: BiasField, cur: BiasField, mask: np.ndarray | None = None) -> float:
    """Coefficient of variation (population std / mean) of ``cur / prev``."""
    if prev.shape != cur.shape:
        raise ShapeError(f"field grids differ: {prev.shape} vs {cur.shape}")
    ratio = cur.values / prev.values
    if mask is not None:
        ratio = ratio[np.asarray(mask, dtype=bool)]
    return float(np.std(ratio) / np.mean(ratio))


def _working_mask(vol: Volume3D, mask) -> np.ndarray:
    data = np.asarray(vol.data)
    sel = data > LOG_FLOOR
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != vol.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match volume {vol.shape}")
        sel &= mask
    if not sel.any():
        raise EmptyInputError("no voxels with positive intensity inside the mask")
    return sel


def _run_level(y, sel, shape, spacing, control_spacing, log_field, centers, params):
    """Iterate labeling + spline fitting at one control-grid resolution."""
    fitter = SplineFitter(shape, spacing, control_spacing, sel.astype(np.float64), params.damping)
    coef = fitter.fit(log_field)
    log_field = fitter.evaluate(coef)
    resid = np.zeros(shape)
    for it in range(1, params.max_iter + 1):
        update = np.zeros_like(coef)
        for _ in range(params.smoothing_passes):
            corrected = y - log_field[sel]
            labels, centers = _kmeans_1d(corrected, centers)
            resid[sel] = corrected - centers[labels]
            step = fitter.fit(resid)
            update += step
            coef += step
            log_field = fitter.evaluate(coef)
        ratio = np.exp(fitter.evaluate(update)[sel])
        cv = float(np.std(ratio) / np.mean(ratio))
        if cv < params.tol:
            return log_field, centers, it, True
    return log_field, centers, params.max_iter, False


def estimate_bias_field(vol: Volume3D, mask: np.ndarray | None = None,
                        params: BiasParams | None = None) -> BiasField:
    """Estimate ``f`` such that ``vol / f`` is free of smooth shading.

    Only voxels inside ``mask`` (default: every voxel) with intensity above
    the log floor drive the fit; the spline is evaluated on the whole grid.

    Tissue is modeled as piecewise constant in the log domain: every
    iteration assigns voxels of the currently corrected image to the nearest
    of ``n_classes`` 1-D k-means centers, and the spline is fitted to the
    deviation from the assigned center. To keep the class structure from being
    absorbed into the field, the fit proceeds coarse to fine (one span over
    the field of view, then twice the control spacing, then the control
    spacing), and the coarse levels work on a 3x3x3 median-filtered log image
    so noise does not blur the class boundaries.

    The result has geometric mean 1 over the grid. ``converged`` is False if
    any level used up ``max_iter`` iterations.
    """
    params = params or BiasParams()
    params.validate(vol.spacing)
    sel = _working_mask(vol, mask)
    shape, spacing = vol.shape, vol.spacing
    L = np.log(np.maximum(np.asarray(vol.data, dtype=np.float64), LOG_FLOOR))
    denoised = _masked_median(L, sel)

    fov = max((n - 1) * s for n, s in zip(shape, spacing))
    coarse = max(fov, 2 * params.control_spacing_mm)
    schedule = [(denoised, coarse), (denoised, 2 * params.control_spacing_mm),
                (L, 2 * params.control_spacing_mm), (L, params.control_spacing_mm)]

    log_field = np.zeros(shape)
    centers = np.quantile(denoised[sel], (np.arange(params.n_classes) + 0.5) / params.n_classes)
    converged, total = True, 0
    for image, control_spacing in schedule:
        log_field, centers, n, ok = _run_level(image[sel], sel, shape, spacing, control_spacing,
                                               log_field, centers, params)
        total += n
        converged &= ok
        log.debug("bias level %.0f mm: %d iterations, converged=%s", control_spacing, n, ok)

    log_field -= log_field.mean()
    return BiasField(np.exp(log_field), spacing, converged=converged, n_iter=total)


def correct_bias(vol: Volume3D, field: BiasField) -> Volume3D:
    if field.shape != vol.shape:
        raise ShapeError(f"field grid {field.shape} does not match volume {vol.shape}")
    return vol.with_data(np.asarray(vol.data, dtype=np.float64) / field.values)
