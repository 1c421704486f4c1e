"""Tissue volumes in millilitres, cohort summary tables and max-scaled series."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, ParameterError
from .hmrf import TISSUES, TissueProbabilityMaps

DEFAULT_THRESHOLD = 0.4
VOLUME_HEADER = ("patient_id", "visit", "csf_ml", "gm_ml", "wm_ml")
PLOT_HEADER = ("patient_id", "visit", "tissue", "scaled_volume")


def tissue_volume_ml(prob, voxel_vol_mm3: float, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Number of voxels with ``p > threshold`` times the voxel volume, in mL."""
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    if voxel_vol_mm3 <= 0:
        raise ParameterError("voxel volume must be positive")
    count = int(np.count_nonzero(np.asarray(prob) > threshold))
    return count * float(voxel_vol_mm3) / 1000.0


def visit_volumes(maps: TissueProbabilityMaps, voxel_vol_mm3: float,
                  threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float, float]:
    """``(csf, gm, wm)`` volumes in mL from the three probability maps."""
    return tuple(tissue_volume_ml(maps.pve[k], voxel_vol_mm3, threshold) for k in range(3))


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    visit: int
    volumes_ml: tuple[float, float, float]
    voxel_volume_mm3: float
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        if self.visit < 1:
            raise ParameterError("visit indices are 1-based")
        if any(v < 0 for v in self.volumes_ml):
            raise ParameterError("volumes must be non-negative")

    def volume(self, tissue: str) -> float:
        return self.volumes_ml[TISSUES.index(tissue)]


def check_visit_sequence(records) -> None:
    """Visits of each patient must be contiguous from 1 in the given order."""
    seen: dict[str, int] = {}
    for r in records:
        expected = seen.get(r.patient_id, 0) + 1
        if r.visit != expected:
            raise ParameterError(f"patient {r.patient_id}: visit {r.visit} follows {expected - 1}")
        seen[r.patient_id] = r.visit


def max_scale(series) -> np.ndarray:
    """Divide a series by its maximum."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError("cannot scale an empty series")
    top = x.max()
    if not top > 0:
        raise ParameterError("series maximum must be positive")
    return x / top


@dataclass
class CohortStats:
    """``mean[tissue][visit]``, ``std[tissue][visit]`` and ``count[visit]``."""

    visits: list[int] = field(default_factory=list)
    mean: dict[str, dict[int, float]] = field(default_factory=dict)
    std: dict[str, dict[int, float]] = field(default_factory=dict)
    count: dict[int, int] = field(default_factory=dict)


def cohort_stats(records) -> CohortStats:
    """Per (visit, tissue) mean and sample standard deviation across patients."""
    records = list(records)
    if not records:
        raise EmptyInputError("no visit records")
    visits = sorted({r.visit for r in records})
    stats = CohortStats(visits=visits, mean={t: {} for t in TISSUES}, std={t: {} for t in TISSUES})
    for v in visits:
        rows = np.array([r.volumes_ml for r in records if r.visit == v], dtype=np.float64)
        stats.count[v] = rows.shape[0]
        means = rows.mean(axis=0)
        stds = rows.std(axis=0, ddof=1) if rows.shape[0] >= 2 else np.zeros(3)
        for k, t in enumerate(TISSUES):
            stats.mean[t][v] = float(means[k])
            stats.std[t][v] = float(stds[k])
    return stats


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _render(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def volumes_csv(records) -> str:
    rows = [(r.patient_id, r.visit, *(_fmt(v) for v in r.volumes_ml)) for r in records]
    return _render(rows, VOLUME_HEADER)


def read_volumes_csv(text: str) -> list[VisitRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != VOLUME_HEADER:
        raise ParameterError(f"expected header {','.join(VOLUME_HEADER)}")
    out = []
    for row in reader:
        vols = tuple(float(row[f"{t}_ml"]) for t in TISSUES)
        out.append(VisitRecord(row["patient_id"], int(row["visit"]), vols, float("nan")))
    return out


def cohort_table_csv(stats: CohortStats | None) -> str:
    """Tissue rows by visit columns; each cell is ``mean ± std`` with the patient count row first."""
    visits = stats.visits if stats else []
    header = ("tissue", *(f"visit_{v}" for v in visits))
    rows = []
    if stats:
        rows.append(("n_patients", *(stats.count[v] for v in visits)))
        for t in TISSUES:
            rows.append((t, *(f"{_fmt(stats.mean[t][v])} ± {_fmt(stats.std[t][v])}" for v in visits)))
    return _render(rows, header)


def plot_csv(records) -> str:
    """Per patient and tissue, volumes divided by that patient's maximum across visits."""
    by_patient: dict[str, list[VisitRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    rows = []
    for pid, recs in by_patient.items():
        recs = sorted(recs, key=lambda r: r.visit)
        for k, t in enumerate(TISSUES):
            series = [r.volumes_ml[k] for r in recs]
            scaled = max_scale(series) if max(series) > 0 else np.zeros(len(series))
            rows.extend((pid, r.visit, t, f"{s:.6f}") for r, s in zip(recs, scaled))
    return _render(rows, PLOT_HEADER)
