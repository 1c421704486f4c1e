"""Per-patient and cohort orchestration plus report emission.

Stage order per patient: bias correction, brain extraction, registration of
follow-ups onto visit 1, segmentation, volumetry, trend. Each stage runs over
all visits before the next starts, so stage start times are monotone.

Follow-ups are segmented on their own grid by default (``measure_space``
"native"). Trilinear resampling onto visit 1 blurs tissue edges into
partial-volume voxels that visit 1 does not have, which shifts follow-up
CSF and GM volumes by several percent; "base" keeps that behaviour for
comparison.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bias_field import BiasParams, correct_bias, estimate_bias_field
from .brain_extract import ExtractParams, extract_brain
from .errors import ClassCollapseError, EmptyInputError, ManifestError, ParameterError
from .hmrf import TISSUES, SegConfig, save_maps, segment_hmrf
from .nifti_io import read_nifti, write_nifti
from .registration import (RegParams, RigidTransform, register_rigid, resample_nearest, resample_trilinear,
                           save_transform)
from .trend import MIN_VISITS, TrendResult, analyze_trend, trend_csv
from .volume import voxel_volume_mm3
from .volumetry import (DEFAULT_THRESHOLD, VisitRecord, cohort_stats, cohort_table_csv, plot_csv,
                        visit_volumes, volumes_csv)

log = logging.getLogger(__name__)

STAGES = ("bias", "strip", "register", "segment", "volume", "trend")
OUTPUT_FILES = ("volumes.csv", "trend.csv", "cohort_table.csv", "plot.csv", "summary.json")


@dataclass(frozen=True)
class PatientEntry:
    id: str
    visits: tuple[Path, ...]


@dataclass(frozen=True)
class Manifest:
    patients: tuple[PatientEntry, ...]

    @classmethod
    def from_json(cls, doc, base_dir=".") -> "Manifest":
        """Validate ``{"patients": [{"id": ..., "visits": [path, ...]}]}``.

        Relative visit paths are resolved against ``base_dir``.
        """
        if not isinstance(doc, dict) or not isinstance(doc.get("patients"), list):
            raise ManifestError('manifest must be an object with a "patients" list')
        base = Path(base_dir)
        seen = set()
        patients = []
        for i, entry in enumerate(doc["patients"]):
            if not isinstance(entry, dict) or "id" not in entry or "visits" not in entry:
                raise ManifestError(f"patient entry {i} needs 'id' and 'visits'")
            pid = str(entry["id"])
            if pid in seen:
                raise ManifestError(f"duplicate patient id {pid!r}")
            seen.add(pid)
            visits = entry["visits"]
            if not isinstance(visits, list) or len(visits) < MIN_VISITS:
                raise ManifestError(f"patient {pid}: at least three visits are required, got "
                                    f"{len(visits) if isinstance(visits, list) else 0}")
            patients.append(PatientEntry(pid, tuple(base / str(v) for v in visits)))
        return cls(tuple(patients))

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        return cls.from_json(doc, path.parent)


@dataclass(frozen=True)
class PipelineConfig:
    beta_mrf: float = 0.4
    pve_threshold: float = DEFAULT_THRESHOLD
    deadband_ml: float = 1.0
    bias: BiasParams = field(default_factory=BiasParams)
    extract: ExtractParams = field(default_factory=ExtractParams)
    reg: RegParams = field(default_factory=RegParams)
    seg: SegConfig = field(default_factory=SegConfig)
    out_dir: Path | None = None
    workers: int = 1
    seed: int = 0
    keep_intermediates: bool = False
    # "native": follow-ups segmented on their own grid; "base": after resampling onto visit 1
    measure_space: str = "native"
    # segmentations leaving a class with a smaller share of the brain are rejected
    min_class_fraction: float = 0.01

    def __post_init__(self):
        if self.measure_space not in ("base", "native"):
            raise ParameterError(f"measure_space must be 'base' or 'native', got {self.measure_space!r}")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        if not 0 <= self.min_class_fraction < 1 / 3:
            raise ParameterError("min_class_fraction must lie in [0, 1/3)")

    def segmentation(self) -> SegConfig:
        return replace(self.seg, beta=self.beta_mrf)

    def to_json(self) -> dict:
        """Settings that affect results; worker count and output location are excluded."""
        return {
            "beta_mrf": self.beta_mrf, "pve_threshold": self.pve_threshold, "deadband_ml": self.deadband_ml,
            "bias": asdict(self.bias), "extract": asdict(self.extract), "reg": asdict(self.reg),
            "seg": asdict(self.segmentation()), "seed": self.seed, "measure_space": self.measure_space,
            "min_class_fraction": self.min_class_fraction,
        }


@dataclass
class StageFailure:
    visit: int | None
    stage: str
    message: str

    def to_json(self) -> dict:
        return {"visit": self.visit, "stage": self.stage, "message": self.message}


@dataclass
class PatientReport:
    patient_id: str
    n_visits: int
    records: list[VisitRecord] = field(default_factory=list)
    transforms: dict[int, tuple[RigidTransform, float | None]] = field(default_factory=dict)
    class_params: dict[int, dict] = field(default_factory=dict)
    trends: dict[str, TrendResult] = field(default_factory=dict)
    failures: list[StageFailure] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    stage_start: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def fully_failed(self) -> bool:
        return not self.records

    def to_json(self) -> dict:
        """Deterministic content only (timings are left out)."""
        return {
            "patient_id": self.patient_id,
            "n_visits": self.n_visits,
            "volumes_ml": {str(r.visit): dict(zip(TISSUES, r.volumes_ml)) for r in self.records},
            "transforms": {str(v): T.to_json(cost) for v, (T, cost) in sorted(self.transforms.items())},
            "class_params": {str(v): p for v, p in sorted(self.class_params.items())},
            "trends": {t: r.to_json() for t, r in self.trends.items()},
            "trend_available": bool(self.trends),
            "failures": [f.to_json() for f in self.failures],
            "warnings": list(self.warnings),
        }


class _Stage:
    """Records the start time and accumulated duration of one stage."""

    def __init__(self, report: PatientReport, name: str, t0: float):
        self.report, self.name, self.t0 = report, name, t0

    def __enter__(self):
        self.start = time.perf_counter()
        self.report.stage_start[self.name] = self.start - self.t0
        return self

    def __exit__(self, *exc):
        self.report.timings[self.name] = time.perf_counter() - self.start
        return False


def _fail(report: PatientReport, visit, stage: str, exc: Exception) -> None:
    msg = f"{type(exc).__name__}: {exc}"
    report.failures.append(StageFailure(visit, stage, msg))
    log.warning("patient %s visit %s failed at %s: %s", report.patient_id, visit, stage, msg)


def run_patient(entry: PatientEntry, config: PipelineConfig) -> PatientReport:
    """Full per-patient pipeline; a failing visit never stops the others."""
    report = PatientReport(entry.id, len(entry.visits))
    t0 = time.perf_counter()
    n = len(entry.visits)
    visits = range(1, n + 1)
    corrected, masks = {}, {}
    inter = None
    if config.keep_intermediates and config.out_dir is not None:
        inter = Path(config.out_dir) / "intermediates" / entry.id
        inter.mkdir(parents=True, exist_ok=True)

    with _Stage(report, "bias", t0):
        for v, path in zip(visits, entry.visits):
            try:
                vol = read_nifti(path)
            except Exception as exc:  # noqa: BLE001 - isolate any stage failure
                _fail(report, v, "ingest", exc)
                continue
            try:
                corrected[v] = correct_bias(vol, estimate_bias_field(vol, params=config.bias))
            except Exception as exc:  # noqa: BLE001
                _fail(report, v, "bias", exc)

    with _Stage(report, "strip", t0):
        for v in visits:
            if v not in corrected:
                continue
            try:
                masks[v], _ = extract_brain(corrected[v], config.extract)
            except Exception as exc:  # noqa: BLE001
                _fail(report, v, "strip", exc)
                del corrected[v]

    # images to segment: native grids, or the visit-1 grid in "base" mode
    native = config.measure_space == "native"
    aligned: dict[int, tuple] = {v: (corrected[v], masks[v]) for v in masks} if native else {}
    with _Stage(report, "register", t0):
        if 1 in masks:
            base = corrected[1]
            base_stripped = base.with_data(np.where(masks[1], np.asarray(base.data), 0.0))
            aligned[1] = (base, masks[1])
            for v in visits[1:]:
                if v not in masks:
                    continue
                try:
                    vol, mask = corrected[v], masks[v]
                    stripped = vol.with_data(np.where(mask, np.asarray(vol.data), 0.0))
                    T, cost = register_rigid(base_stripped, stripped, config.reg)
                    report.transforms[v] = (T, cost)
                    if inter is not None:
                        save_transform(T, cost, inter / f"visit{v}_to_visit1.json")
                    if not native:
                        mask_vol = vol.with_data(mask.astype(np.float32))
                        moved_mask = np.asarray(resample_nearest(mask_vol, T, base).data) > 0.5
                        aligned[v] = (resample_trilinear(vol, T, base), moved_mask)
                except Exception as exc:  # noqa: BLE001
                    _fail(report, v, "register", exc)
        elif n > 1:
            report.warnings.append("visit 1 unavailable; follow-ups cannot be registered")

    seg_config = config.segmentation()
    maps_by_visit = {}
    with _Stage(report, "segment", t0):
        for v in visits:
            if v not in aligned:
                continue
            vol, mask = aligned[v]
            try:
                maps, params = segment_hmrf(vol, mask, seg_config)
                if min(params.pi) < config.min_class_fraction:
                    raise ClassCollapseError(
                        f"degenerate segmentation, class weights {np.round(params.pi, 4).tolist()}")
                maps_by_visit[v] = maps
                report.class_params[v] = params.to_json()
                if inter is not None:
                    write_nifti(vol.with_data(np.where(mask, np.asarray(vol.data), 0.0)),
                                inter / f"visit{v}_seg_input.nii.gz")
                    save_maps(maps, vol, inter / f"visit{v}")
            except Exception as exc:  # noqa: BLE001
                _fail(report, v, "segment", exc)

    with _Stage(report, "volume", t0):
        for v in visits:
            if v not in maps_by_visit:
                continue
            vol, _ = aligned[v]
            vv = voxel_volume_mm3(vol)
            try:
                vols = tuple(float(x) for x in visit_volumes(maps_by_visit[v], vv, config.pve_threshold))
                report.records.append(VisitRecord(entry.id, v, vols, vv, (str(entry.visits[v - 1]),)))
            except Exception as exc:  # noqa: BLE001
                _fail(report, v, "volume", exc)

    with _Stage(report, "trend", t0):
        if len(report.records) >= MIN_VISITS:
            for k, tissue in enumerate(TISSUES):
                series = [r.volumes_ml[k] for r in report.records]
                report.trends[tissue] = analyze_trend(series, config.deadband_ml)
            if len(report.records) < n:
                report.warnings.append("trend computed over the successful visits only")
        else:
            report.warnings.append(f"trend unavailable: {len(report.records)} successful visits")
    return report


def _run_one(args):
    entry, config = args
    return run_patient(entry, config)


def run_patients(manifest: Manifest, config: PipelineConfig) -> list[PatientReport]:
    """Reports in manifest order, whatever the worker count."""
    if not manifest.patients:
        raise EmptyInputError("manifest lists no patients")
    jobs = [(p, config) for p in manifest.patients]
    if config.workers <= 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(_run_one, jobs))


def summary_json(reports, config: PipelineConfig) -> str:
    doc = {
        "config": config.to_json(),
        "patients": [r.to_json() for r in reports],
        "n_patients": len(reports),
        "n_fully_failed": sum(r.fully_failed for r in reports),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render_reports(reports, config: PipelineConfig) -> dict[str, str]:
    records = [rec for r in reports for rec in r.records]
    stats = cohort_stats(records) if records else None
    trends = [(r.patient_id, t, res) for r in reports for t, res in r.trends.items()]
    return {
        "volumes.csv": volumes_csv(records),
        "trend.csv": trend_csv(trends),
        "cohort_table.csv": cohort_table_csv(stats),
        "plot.csv": plot_csv(records),
        "summary.json": summary_json(reports, config),
    }


def write_atomic(files: dict[str, str], outdir) -> list[Path]:
    """Write every file to a temp name first, then rename them all into place.

    If any temp write fails, the temps are removed and nothing is published.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    temps: list[tuple[str, Path]] = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=outdir)
            temps.append((name, Path(tmp)))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
    except BaseException:
        for _, tmp in temps:
            tmp.unlink(missing_ok=True)
        raise
    out = []
    for name, tmp in temps:
        os.replace(tmp, outdir / name)
        out.append(outdir / name)
    return out


def emit_reports(reports, config: PipelineConfig, outdir) -> list[Path]:
    return write_atomic(render_reports(reports, config), outdir)


def run_cohort(manifest: Manifest, config: PipelineConfig) -> tuple[list[PatientReport], int]:
    """Run every patient, write the report files and return ``(reports, exit_code)``.

    The exit code is 1 if any patient produced no volumes at all, else 0.
    """
    if config.out_dir is None:
        raise ParameterError("an output directory is required")
    reports = run_patients(manifest, config)
    emit_reports(reports, config, config.out_dir)
    for r in reports:
        log.info("patient %s: %s", r.patient_id, ", ".join(f"{k} {v:.1f}s" for k, v in r.timings.items()))
    return reports, int(any(r.fully_failed for r in reports))
