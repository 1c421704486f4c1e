"""Six-parameter rigid registration of follow-up scans onto a base scan.

Transforms map *moving* space onto *fixed* space: resampling pulls each fixed
(reference) voxel center ``p`` from the moving image at ``T^-1(p)``. Rotation
is Euler Z·Y·X about a stored center so that rotation and translation
parameters stay roughly decoupled for the optimizer.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize

from .errors import EmptyInputError, ParameterError
from .volume import Volume3D

log = logging.getLogger(__name__)


def _wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(float(a), 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


def euler_to_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def matrix_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    ry = math.asin(-max(-1.0, min(1.0, R[2, 0])))
    rx = math.atan2(R[2, 1], R[2, 2])
    rz = math.atan2(R[1, 0], R[0, 0])
    return rx, ry, rz


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (Euler ZYX, radians) about ``center`` followed by a translation (mm)."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(_wrap_angle(a) for a in self.rotation))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center=tuple(center))

    @classmethod
    def from_params(cls, params, center) -> "RigidTransform":
        """Build from a 6-vector ``(rx, ry, rz, tx, ty, tz)``."""
        p = [float(v) for v in params]
        return cls(tuple(p[:3]), tuple(p[3:]), tuple(center))

    @property
    def params(self) -> np.ndarray:
        return np.array(self.rotation + self.translation)

    @property
    def matrix(self) -> np.ndarray:
        return euler_to_matrix(*self.rotation)

    def inverse(self) -> "RigidTransform":
        R = self.matrix
        return RigidTransform(matrix_to_euler(R.T), tuple(-R.T @ np.asarray(self.translation)), self.center)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first. The result keeps ``self.center``."""
        Ra, Rb = self.matrix, other.matrix
        ca, cb = np.asarray(self.center), np.asarray(other.center)
        R = Ra @ Rb
        t = R @ (ca - cb) + Ra @ (cb + np.asarray(other.translation) - ca) + np.asarray(self.translation)
        return RigidTransform(matrix_to_euler(R), tuple(t), self.center)

    def to_json(self, final_cost: float | None = None) -> dict:
        return {
            "euler_rad": list(self.rotation),
            "translation_mm": list(self.translation),
            "center_mm": list(self.center),
            "final_cost": final_cost,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RigidTransform":
        return cls(tuple(doc["euler_rad"]), tuple(doc["translation_mm"]), tuple(doc["center_mm"]))


def apply_to_point(T: RigidTransform, p) -> np.ndarray:
    """``R (p - c) + c + t`` for one point or an ``(N, 3)`` array of points."""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(T.center)
    return (p - c) @ T.matrix.T + c + np.asarray(T.translation)


def _voxel_points(ref: Volume3D) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in ref.shape], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    return idx * np.asarray(ref.spacing) + np.asarray(ref.origin)


def _sample_coords(moving: Volume3D, T: RigidTransform, points: np.ndarray) -> np.ndarray:
    src = apply_to_point(T.inverse(), points)
    coords = (src - np.asarray(moving.origin)) / np.asarray(moving.spacing)
    # snap round-off so integer-voxel shifts sample exactly
    rounded = np.round(coords)
    coords = np.where(np.abs(coords - rounded) < 1e-6, rounded, coords)
    return coords.T


def resample(moving: Volume3D, T: RigidTransform, reference: Volume3D, order: int = 1) -> Volume3D:
    """Pull ``moving`` onto the grid of ``reference`` through ``T``; outside samples are 0."""
    coords = _sample_coords(moving, T, _voxel_points(reference))
    out = ndimage.map_coordinates(np.asarray(moving.data, dtype=np.float64), coords, order=order,
                                  mode="constant", cval=0.0, prefilter=False)
    return Volume3D(out.reshape(reference.shape).astype(np.float32), reference.spacing, reference.origin,
                    reference.orientation, moving.intensity_units)


def resample_trilinear(moving: Volume3D, T: RigidTransform, reference: Volume3D) -> Volume3D:
    return resample(moving, T, reference, order=1)


def resample_nearest(moving: Volume3D, T: RigidTransform, reference: Volume3D) -> Volume3D:
    return resample(moving, T, reference, order=0)


class _CostFunction:
    """MSE between fixed brain voxels and the transformed moving image.

    Fixed-side coordinates and intensities are computed once; each evaluation
    only transforms the cached points and samples the moving image.
    """

    def __init__(self, fixed: Volume3D, moving: Volume3D, center):
        fdata = np.asarray(fixed.data, dtype=np.float64)
        sel = fdata > 0
        if not sel.any():
            raise EmptyInputError("fixed image has no voxels > 0")
        idx = np.argwhere(sel).astype(np.float64)
        self.points = idx * np.asarray(fixed.spacing) + np.asarray(fixed.origin)
        self.values = fdata[sel]
        self.moving = np.asarray(moving.data, dtype=np.float64)
        self.m_origin = np.asarray(moving.origin)
        self.m_spacing = np.asarray(moving.spacing)
        self.center = tuple(center)
        self.evaluations = 0

    def transform(self, params) -> RigidTransform:
        return RigidTransform.from_params(params, self.center)

    def __call__(self, params) -> float:
        self.evaluations += 1
        T = self.transform(params)
        inv = T.inverse()
        src = apply_to_point(inv, self.points)
        coords = ((src - self.m_origin) / self.m_spacing).T
        sampled = ndimage.map_coordinates(self.moving, coords, order=1, mode="constant", cval=0.0,
                                          prefilter=False)
        diff = self.values - sampled
        return float(np.dot(diff, diff) / diff.size)


def mse_cost(fixed: Volume3D, moving: Volume3D, T: RigidTransform) -> float:
    """Mean squared difference over voxels where ``fixed > 0``."""
    return _CostFunction(fixed, moving, T.center)(T.params)


@dataclass(frozen=True)
class RegParams:
    levels: int = 3
    max_evals: int = 2000
    tol_mm: float = 0.01
    tol_rad: float = 0.0005
    simplex_mm: float = 5.0
    simplex_rad: float = 0.05
    smoothing_vox: float = 1.0

    def __post_init__(self):
        if self.levels < 1:
            raise ParameterError("levels must be >= 1")
        if self.smoothing_vox < 0:
            raise ParameterError("smoothing must be >= 0")
        if min(self.max_evals, self.tol_mm, self.tol_rad, self.simplex_mm, self.simplex_rad) <= 0:
            raise ParameterError("evaluation budget, tolerances and simplex scales must be positive")


def downsample2(vol: Volume3D) -> Volume3D:
    """2x2x2 mean pooling; odd trailing slices are dropped.

    The origin moves to the center of the first pooled block so physical
    coordinates stay consistent across pyramid levels.
    """
    d = np.asarray(vol.data, dtype=np.float64)
    n = [max(1, s // 2) for s in d.shape]
    if any(s < 2 for s in d.shape):
        return vol
    d = d[: 2 * n[0], : 2 * n[1], : 2 * n[2]]
    pooled = d.reshape(n[0], 2, n[1], 2, n[2], 2).mean(axis=(1, 3, 5))
    spacing = tuple(2 * s for s in vol.spacing)
    origin = tuple(o + s / 2 for o, s in zip(vol.origin, vol.spacing))
    return Volume3D(pooled.astype(np.float32), spacing, origin, vol.orientation, vol.intensity_units)


def _pyramid(vol: Volume3D, levels: int) -> list[Volume3D]:
    out = [vol]
    for _ in range(levels - 1):
        if min(out[-1].shape) < 8:
            break
        out.append(downsample2(out[-1]))
    return out[::-1]  # coarsest first


def _intensity_centroid(vol: Volume3D) -> np.ndarray:
    d = np.clip(np.asarray(vol.data, dtype=np.float64), 0, None)
    w = d.sum()
    idx = np.indices(d.shape).reshape(3, -1)
    return (idx @ d.ravel()) / w * np.asarray(vol.spacing) + np.asarray(vol.origin)


def _presmooth(vol: Volume3D, sigma_vox: float) -> Volume3D:
    if sigma_vox == 0:
        return vol
    d = ndimage.gaussian_filter(np.asarray(vol.data, dtype=np.float64), sigma_vox, mode="constant")
    # keep the fixed-side support of the original so background stays excluded
    d = np.where(np.asarray(vol.data) > 0, d, 0.0)
    return vol.with_data(d)


def registration_cost(fixed: Volume3D, moving: Volume3D, T: RigidTransform,
                      params: RegParams | None = None) -> float:
    """The objective :func:`register_rigid` minimizes: MSE after pre-smoothing."""
    params = params or RegParams()
    return mse_cost(_presmooth(fixed, params.smoothing_vox), _presmooth(moving, params.smoothing_vox), T)


def register_rigid(fixed: Volume3D, moving: Volume3D, params: RegParams | None = None
                   ) -> tuple[RigidTransform, float]:
    """Coarse-to-fine Nelder-Mead search minimizing :func:`mse_cost`.

    Both images are Gaussian-smoothed by ``smoothing_vox`` first. On noisy
    inputs the raw MSE rewards poses whose samples fall between voxels,
    because trilinear interpolation averages noise away; smoothing removes
    that bias. Returns the finest-level optimum and its
    :func:`registration_cost`. The start point at the
    coarsest level is the identity rotation plus the translation aligning the
    two intensity centroids; if the optimizer ends worse than the identity the
    identity is returned instead.
    """
    params = params or RegParams()
    if not (np.asarray(fixed.data) > 0).any() or not (np.asarray(moving.data) > 0).any():
        raise EmptyInputError("registration inputs must contain voxels > 0")

    center = tuple(fixed.center_mm)
    fixed = _presmooth(fixed, params.smoothing_vox)
    moving = _presmooth(moving, params.smoothing_vox)
    scale = np.array([params.simplex_rad] * 3 + [params.simplex_mm] * 3)
    xatol = min(params.tol_mm / params.simplex_mm, params.tol_rad / params.simplex_rad)

    x = np.zeros(6)
    x[3:] = _intensity_centroid(fixed) - _intensity_centroid(moving)

    fixed_levels = _pyramid(fixed, params.levels)
    moving_levels = _pyramid(moving, len(fixed_levels))
    for level, (f, m) in enumerate(zip(fixed_levels, moving_levels)):
        cost = _CostFunction(f, m, center)
        start = cost(x)
        simplex = np.vstack([np.zeros(6), np.eye(6)]) + x / scale
        res = optimize.minimize(
            lambda z: cost(z * scale), x / scale, method="Nelder-Mead",
            options={"initial_simplex": simplex, "maxfev": params.max_evals,
                     "xatol": xatol, "fatol": 1e-9 * max(start, 1.0)},
        )
        if res.fun <= start:
            x = res.x * scale
        log.debug("level %d: %d evals, cost %.4g -> %.4g", level, cost.evaluations, start, res.fun)

    final = _CostFunction(fixed, moving, center)
    best_cost = final(x)
    identity_cost = final(np.zeros(6))
    if identity_cost < best_cost:
        x, best_cost = np.zeros(6), identity_cost
    return RigidTransform.from_params(x, center), best_cost


def save_transform(T: RigidTransform, final_cost: float | None, path) -> None:
    Path(path).write_text(json.dumps(T.to_json(final_cost), indent=2) + "\n")


def load_transform(path) -> tuple[RigidTransform, float | None]:
    doc = json.loads(Path(path).read_text())
    return RigidTransform.from_json(doc), doc.get("final_cost")
