"""Synthetic nested-ellipsoid head phantoms with exact tissue ground truth.

Labels: 0 background, 1 CSF, 2 GM, 3 WM, 4 skull. Ellipsoids are centered on
the grid and their semi-axes are given in voxels. Longitudinal series shrink
the GM shell while the CSF and skull shells stay fixed, so CSF grows by
exactly the GM volume that is lost.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _rng
from .errors import ParameterError
from .nifti_io import write_nifti
from .registration import RigidTransform, apply_to_point
from .volume import Volume3D

LABELS = {0: "background", 1: "csf", 2: "gm", 3: "wm", 4: "skull"}
SKULL_INTENSITY_FRACTION = 0.8

# stream ids for _rng.stream
_NOISE, _BIAS, _EXTRA_NOISE = 1, 2, 3


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    means: tuple[float, float, float] = (500.0, 2000.0, 2500.0)
    sigma: float = 100.0
    # clearly distinct semi-axes so every rotation axis is identifiable
    wm_axes: tuple[float, float, float] = (15.0, 19.0, 11.5)
    gm_axes: tuple[float, float, float] = (19.5, 24.0, 15.5)
    csf_axes: tuple[float, float, float] = (22.0, 27.0, 18.0)
    skull_axes: tuple[float, float, float] = (25.0, 30.0, 21.0)
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                object.__setattr__(self, f.name, tuple(v))
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"dims must be three positive integers, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ParameterError("spacing must be positive")
        if self.sigma < 0:
            raise ParameterError("sigma must be >= 0")
        csf, gm, wm = self.means
        if not csf < gm < wm:
            raise ParameterError(f"tissue means must increase CSF < GM < WM, got {self.means}")
        shells = (self.wm_axes, self.gm_axes, self.csf_axes, self.skull_axes)
        for axis in range(3):
            radii = [s[axis] for s in shells]
            if not (0 < radii[0] < radii[1] < radii[2] < radii[3]):
                raise ParameterError(f"semi-axes not strictly nested along axis {axis}: {radii}")

    @classmethod
    def from_json(cls, doc: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown phantom spec fields: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class GroundTruth:
    labels: np.ndarray
    counts: dict[int, int]
    volumes_ml: dict[int, float]
    voxel_volume_mm3: float

    @property
    def brain_mask(self) -> np.ndarray:
        return (self.labels >= 1) & (self.labels <= 3)

    def to_json(self) -> dict:
        return {
            "labels": LABELS,
            "voxel_volume_mm3": self.voxel_volume_mm3,
            "counts": {LABELS[k]: v for k, v in self.counts.items()},
            "volumes_ml": {LABELS[k]: v for k, v in self.volumes_ml.items()},
        }


def label_grid(spec: PhantomSpec, motion: RigidTransform | None = None) -> np.ndarray:
    """Voxel labels; with ``motion`` the anatomy is moved by that transform."""
    spacing = np.asarray(spec.spacing)
    center_vox = (np.asarray(spec.dims) - 1) / 2.0
    idx = np.indices(spec.dims, dtype=np.float64).reshape(3, -1).T
    pts = idx * spacing
    if motion is not None:
        pts = apply_to_point(motion.inverse(), pts)
    rel = pts / spacing - center_vox

    labels = np.zeros(idx.shape[0], dtype=np.int8)
    # paint outermost first so inner shells overwrite
    for lab, axes in ((4, spec.skull_axes), (1, spec.csf_axes), (2, spec.gm_axes), (3, spec.wm_axes)):
        r2 = np.sum((rel / np.asarray(axes)) ** 2, axis=1)
        labels[r2 <= 1.0] = lab
    return labels.reshape(spec.dims)


def ground_truth(labels: np.ndarray, spacing) -> GroundTruth:
    vv = float(np.prod(spacing))
    counts = {k: int(np.count_nonzero(labels == k)) for k in LABELS}
    volumes = {k: counts[k] * vv / 1000.0 for k in LABELS if k != 0}
    return GroundTruth(labels, counts, volumes, vv)


def generate_phantom(spec: PhantomSpec, motion: RigidTransform | None = None
                     ) -> tuple[Volume3D, GroundTruth]:
    """Noisy piecewise-constant head volume and its exact labels.

    ``motion`` (center-relative, mm) displaces the anatomy before sampling,
    which is how follow-up visits of a synthetic patient are produced.
    """
    spec.validate()
    labels = label_grid(spec, motion)
    csf, gm, wm = spec.means
    lut = np.array([0.0, csf, gm, wm, SKULL_INTENSITY_FRACTION * wm])
    data = lut[labels]
    if spec.sigma > 0:
        rng = _rng.stream(spec.seed, _NOISE)
        noise = rng.standard_normal(spec.dims) * spec.sigma
        data = np.where(labels > 0, data + noise, 0.0)
    vol = Volume3D(data.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0), intensity_units="a.u.")
    return vol, ground_truth(labels, spec.spacing)


def cosine_field(shape, spacing, amplitude: float, length_scale: float, seed: int) -> np.ndarray:
    """Smooth positive multiplicative field with mean 1 and ``max|f-1| <= amplitude``.

    ``f = exp(c*g) / mean(exp(c*g))`` where ``g`` is a separable cosine mixture
    (one term per axis plus one product term) of wavelength ``2*length_scale``
    normalized to ``max|g| = 1``; ``c`` is found by bisection.
    """
    if amplitude == 0:
        return np.ones(shape)
    rng = _rng.stream(seed, _BIAS)
    w = rng.uniform(0.5, 1.0, size=4)
    phase = rng.uniform(0, 2 * np.pi, size=6)
    axes = []
    for n, s in zip(shape, spacing):
        x = (np.arange(n) - (n - 1) / 2.0) * s
        axes.append(np.pi * x / length_scale)
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    g = (w[0] * np.cos(X + phase[0]) + w[1] * np.cos(Y + phase[1]) + w[2] * np.cos(Z + phase[2])
         + w[3] * np.cos(X + phase[3]) * np.cos(Y + phase[4]) * np.cos(Z + phase[5]))
    g /= np.abs(g).max()

    def field_for(c):
        f = np.exp(c * g)
        return f / f.mean()

    target = amplitude * (1 - 1e-9)
    lo, hi = 0.0, 2.0 * np.log1p(amplitude) + 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.abs(field_for(mid) - 1).max() <= target:
            lo = mid
        else:
            hi = mid
    return field_for(lo)


def apply_bias_field(vol: Volume3D, amplitude: float, length_scale: float, seed: int):
    """Multiply ``vol`` by a known smooth field; returns ``(biased, field)``."""
    from .bias_field import BiasField

    if not 0 <= amplitude <= 0.5:
        raise ParameterError(f"bias amplitude must lie in [0, 0.5], got {amplitude}")
    if length_scale < 4 * max(vol.spacing):
        raise ParameterError("length_scale must be at least 4x the largest voxel spacing")
    f = cosine_field(vol.shape, vol.spacing, amplitude, length_scale, seed)
    out = vol.with_data(np.asarray(vol.data, dtype=np.float64) * f)
    return out, BiasField(f, vol.spacing)


def add_gaussian_noise(vol: Volume3D, sigma: float, seed: int) -> Volume3D:
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    if sigma == 0:
        return vol
    rng = _rng.stream(seed, _EXTRA_NOISE)
    return vol.with_data(np.asarray(vol.data, dtype=np.float64) + sigma * rng.standard_normal(vol.shape))


def _ellipsoid_volume(axes) -> float:
    return 4.0 / 3.0 * np.pi * float(np.prod(axes))


def atrophy_schedule(spec: PhantomSpec, n_visits: int, gm_rate: float = -0.03) -> list[PhantomSpec]:
    """Per-visit specs whose analytic GM shell volume changes by ``gm_rate`` per visit.

    Only the GM outer axes change (uniform scaling); CSF absorbs the lost
    volume because the CSF and skull shells are held fixed.
    """
    v_wm = _ellipsoid_volume(spec.wm_axes)
    v_gm_outer = _ellipsoid_volume(spec.gm_axes)
    base_gm = v_gm_outer - v_wm
    out = []
    for visit in range(n_visits):
        target = base_gm * (1 + gm_rate) ** visit
        s = ((target + v_wm) / v_gm_outer) ** (1 / 3)
        axes = tuple(a * s for a in spec.gm_axes)
        out.append(replace(spec, gm_axes=axes, seed=spec.seed + visit))
    return out


@dataclass(frozen=True)
class CohortSpec:
    """Synthetic longitudinal cohort: per-patient atrophy series plus motion and bias."""

    n_patients: int = 15
    n_visits: int | list[int] = 4
    gm_rate: float = -0.03
    bias_amplitude: float = 0.15
    bias_length_scale: float = 64.0
    max_shift_mm: float = 3.0
    max_rotation_deg: float = 5.0
    anatomy_jitter: float = 0.05
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            object.__setattr__(self, "phantom", PhantomSpec.from_json(self.phantom))
        if isinstance(self.n_visits, tuple):
            object.__setattr__(self, "n_visits", list(self.n_visits))
        counts = [self.n_visits] if isinstance(self.n_visits, int) else self.n_visits
        if self.n_patients < 1 or not counts or min(counts) < 1:
            raise ParameterError("cohort needs at least one patient and one visit")
        if not 0 <= self.anatomy_jitter < 0.5 or self.max_shift_mm < 0 or self.max_rotation_deg < 0:
            raise ParameterError(f"invalid cohort perturbation settings: {self}")

    @classmethod
    def from_json(cls, doc: dict) -> "CohortSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown cohort spec fields: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["phantom"] = self.phantom.to_json()
        return out

    def visits_for(self, patient: int) -> int:
        if isinstance(self.n_visits, int):
            return self.n_visits
        return int(self.n_visits[patient % len(self.n_visits)])


def _patient_spec(cohort: CohortSpec, patient: int) -> PhantomSpec:
    """Per-patient anatomy: every shell scaled by a common random factor."""
    base = cohort.phantom
    rng = _rng.stream(cohort.seed, 100, patient)
    s = 1.0 + rng.uniform(-cohort.anatomy_jitter, cohort.anatomy_jitter)
    scale = lambda axes: tuple(a * s for a in axes)  # noqa: E731
    # leave room for the largest programmed shift inside the grid
    half = min(base.dims) / 2.0 - 1.0 - cohort.max_shift_mm / min(base.spacing)
    if max(base.skull_axes) * s > half:
        s = half / max(base.skull_axes)
    return replace(base, wm_axes=scale(base.wm_axes), gm_axes=scale(base.gm_axes),
                   csf_axes=scale(base.csf_axes), skull_axes=scale(base.skull_axes),
                   seed=int(rng.integers(0, 2**31)))


def grid_center_mm(spec: PhantomSpec) -> tuple[float, float, float]:
    return tuple((np.asarray(spec.dims) - 1) / 2.0 * np.asarray(spec.spacing))


def random_motion(rng: np.random.Generator, max_shift_mm: float, max_rotation_deg: float,
                  center) -> RigidTransform:
    angles = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg, size=3))
    shift = rng.uniform(-max_shift_mm, max_shift_mm, size=3)
    return RigidTransform(tuple(angles), tuple(shift), tuple(center))


def generate_cohort(cohort: CohortSpec, outdir) -> dict:
    """Write visit NIfTIs, ground-truth sidecars and a manifest; return the manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    patients = []
    for p in range(cohort.n_patients):
        pid = f"P{p + 1}"
        pspec = _patient_spec(cohort, p)
        rng = _rng.stream(cohort.seed, 200, p)
        visits = []
        for v, vspec in enumerate(atrophy_schedule(pspec, cohort.visits_for(p), cohort.gm_rate)):
            motion = None if v == 0 else random_motion(rng, cohort.max_shift_mm, cohort.max_rotation_deg,
                                                             grid_center_mm(vspec))
            vol, gt = generate_phantom(vspec, motion)
            if cohort.bias_amplitude > 0:
                vol, _ = apply_bias_field(vol, cohort.bias_amplitude, cohort.bias_length_scale,
                                          seed=vspec.seed)
            path = outdir / f"{pid}_visit{v + 1}.nii.gz"
            write_nifti(vol, path)
            sidecar = gt.to_json()
            sidecar["phantom_spec"] = vspec.to_json()
            sidecar["motion"] = None if motion is None else motion.to_json()
            (outdir / f"{pid}_visit{v + 1}_truth.json").write_text(json.dumps(sidecar, indent=2) + "\n")
            visits.append(path.name)
        patients.append({"id": pid, "visits": visits})
    manifest = {"patients": patients}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
