import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import find_peaks

from longmri.errors import ParameterError
from longmri.nifti_io import read_nifti
from longmri.phantom import (CohortSpec, PhantomSpec, add_gaussian_noise, apply_bias_field, atrophy_schedule,
                             generate_cohort, generate_phantom, label_grid)
from longmri.registration import RigidTransform
from longmri.volume import Volume3D

SMALL = PhantomSpec(dims=(32, 32, 32), spacing=(6.0, 6.0, 6.0), wm_axes=(7.5, 9.5, 5.5),
                    gm_axes=(9.5, 12, 7.5), csf_axes=(11, 13.5, 9), skull_axes=(12.5, 15, 10.5))


def test_histogram_modes(phantom):
    vol, _ = phantom
    values = vol.data[vol.data != 0]
    hist, edges = np.histogram(values, bins=np.arange(0, 3200, 20))
    smooth = np.convolve(hist, np.ones(5) / 5, mode="same")
    peaks, _ = find_peaks(smooth, distance=10, prominence=smooth.max() * 0.05)
    centers = (edges[peaks] + edges[peaks + 1]) / 2
    assert len(centers) == 3
    np.testing.assert_allclose(np.sort(centers), [500, 2000, 2500], atol=50)


def test_noiseless_csf_is_exact(clean_phantom):
    vol, gt = clean_phantom
    assert np.all(vol.data[gt.labels == 1] == 500.0)
    assert np.all(vol.data[gt.labels == 4] == 0.8 * 2500.0)
    assert np.all(vol.data[gt.labels == 0] == 0.0)


def test_deterministic():
    a, _ = generate_phantom(SMALL)
    b, _ = generate_phantom(SMALL)
    assert a.data.tobytes() == b.data.tobytes()


def test_ground_truth_bookkeeping(phantom):
    _, gt = phantom
    assert sum(gt.counts.values()) == 64 ** 3
    for k in (1, 2, 3, 4):
        assert gt.volumes_ml[k] == gt.counts[k] * gt.voxel_volume_mm3 / 1000
    assert gt.brain_mask.sum() == gt.counts[1] + gt.counts[2] + gt.counts[3]


def test_default_volumes_in_cohort_range(phantom):
    _, gt = phantom
    for k in (1, 2, 3):
        assert 300 <= gt.volumes_ml[k] <= 700


@pytest.mark.parametrize("field,value", [
    ("gm_axes", (14.0, 24.0, 15.5)),        # inside WM along x
    ("skull_axes", (22.0, 30.0, 21.0)),     # equal to CSF along x
    ("means", (2000.0, 500.0, 2500.0)),
])
def test_invalid_specs(field, value):
    with pytest.raises(ParameterError):
        PhantomSpec(**{field: value})


def test_spec_json_round_trip():
    doc = json.loads(json.dumps(SMALL.to_json()))
    assert PhantomSpec.from_json(doc) == SMALL
    with pytest.raises(ParameterError):
        PhantomSpec.from_json({"colour": 1})


def test_motion_moves_anatomy():
    shift = RigidTransform((0, 0, 0), (6.0, 0, 0), (0, 0, 0))
    base, moved = label_grid(SMALL), label_grid(SMALL, shift)
    np.testing.assert_array_equal(moved[1:], base[:-1])


def test_bias_amplitude_zero_is_identity(phantom):
    vol, _ = phantom
    out, f = apply_bias_field(vol, 0.0, 64.0, seed=1)
    assert np.all(f.values == 1.0)
    assert out.data.tobytes() == vol.data.tobytes()


@given(amp=st.floats(0.01, 0.5), length=st.floats(24.0, 200.0), seed=st.integers(0, 2**31))
def test_bias_field_bounds(amp, length, seed):
    vol = Volume3D(np.full((12, 10, 8), 100.0), (3.0, 3.0, 3.0))
    out, f = apply_bias_field(vol, amp, length, seed)
    assert np.all(f.values > 0)
    assert np.max(np.abs(f.values - 1)) <= amp + 1e-6
    assert abs(f.values.mean() - 1) <= 1e-3
    np.testing.assert_allclose(np.asarray(out.data) / f.values, vol.data, rtol=1e-6)


def test_bias_field_parameter_checks(phantom):
    vol, _ = phantom
    with pytest.raises(ParameterError):
        apply_bias_field(vol, 0.6, 64.0, 0)
    with pytest.raises(ParameterError):
        apply_bias_field(vol, -0.1, 64.0, 0)
    with pytest.raises(ParameterError):
        apply_bias_field(vol, 0.2, 4.0, 0)


def test_noise_sigma_zero_is_identity(phantom):
    vol, _ = phantom
    assert add_gaussian_noise(vol, 0.0, 3).data.tobytes() == vol.data.tobytes()


def test_noise_standard_deviation():
    # chi-squared with 262143 dof: the sample std lies within 1% of sigma with overwhelming probability
    vol = Volume3D(np.full((64, 64, 64), 1000.0))
    out = add_gaussian_noise(vol, 100.0, 7)
    assert 95 <= np.std(np.asarray(out.data, dtype=np.float64), ddof=1) <= 105


def test_noise_seeds_differ():
    vol = Volume3D(np.full((8, 8, 8), 1000.0))
    assert not np.array_equal(add_gaussian_noise(vol, 10, 1).data, add_gaussian_noise(vol, 10, 2).data)
    with pytest.raises(ParameterError):
        add_gaussian_noise(vol, -1.0, 1)


def test_atrophy_schedule_volumes():
    specs = atrophy_schedule(PhantomSpec(), 4, gm_rate=-0.03)
    gm = []
    for s in specs:
        _, gt = generate_phantom(PhantomSpec(**{**s.to_json(), "sigma": 0.0}))
        gm.append(gt.volumes_ml[2])
    ratios = np.diff(gm) / gm[:-1]
    np.testing.assert_allclose(ratios, -0.03, atol=0.005)
    assert all(s.csf_axes == specs[0].csf_axes for s in specs)


def test_generate_cohort(tmp_path):
    cohort = CohortSpec(n_patients=2, n_visits=[3, 4], phantom=SMALL, bias_amplitude=0.1,
                        bias_length_scale=60.0)
    manifest = generate_cohort(cohort, tmp_path)
    assert [len(p["visits"]) for p in manifest["patients"]] == [3, 4]
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    vol = read_nifti(tmp_path / manifest["patients"][1]["visits"][2])
    assert vol.shape == SMALL.dims
    truth = json.loads((tmp_path / "P2_visit3_truth.json").read_text())
    assert truth["motion"] is not None and set(truth["volumes_ml"]) >= {"csf", "gm", "wm"}
    assert json.loads((tmp_path / "P2_visit1_truth.json").read_text())["motion"] is None


def test_cohort_spec_json():
    spec = CohortSpec(n_patients=3, phantom=SMALL)
    assert CohortSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    with pytest.raises(ParameterError):
        CohortSpec.from_json({"patients": 3})
