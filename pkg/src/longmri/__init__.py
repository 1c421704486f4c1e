"""Longitudinal brain tissue volumetry from T1-weighted MRI series.

Stages: NIfTI I/O, bias-field correction, brain extraction, rigid
registration, HMRF-EM tissue segmentation, volumetry and Mann-Kendall trend
analysis, plus a synthetic phantom generator for validation.
"""
from .bias_field import BiasField, BiasParams, correct_bias, estimate_bias_field
from .brain_extract import ExtractParams, dice, extract_brain
from .hmrf import GaussianClassParams, SegConfig, TissueProbabilityMaps, segment_hmrf
from .nifti_io import read_nifti, write_nifti
from .phantom import CohortSpec, PhantomSpec, apply_bias_field, generate_cohort, generate_phantom
from .registration import RegParams, RigidTransform, register_rigid, resample_trilinear
from .trend import TrendResult, analyze_trend
from .volume import Volume3D, voxel_volume_mm3
from .volumetry import VisitRecord, cohort_stats, tissue_volume_ml

__all__ = [
    "BiasField", "BiasParams", "CohortSpec", "ExtractParams", "GaussianClassParams", "PhantomSpec",
    "RegParams", "RigidTransform", "SegConfig", "TissueProbabilityMaps", "TrendResult", "VisitRecord",
    "Volume3D", "analyze_trend", "apply_bias_field", "cohort_stats", "correct_bias", "dice",
    "estimate_bias_field", "extract_brain", "generate_cohort", "generate_phantom", "read_nifti",
    "register_rigid", "resample_trilinear", "segment_hmrf", "tissue_volume_ml", "voxel_volume_mm3",
    "write_nifti",
]
