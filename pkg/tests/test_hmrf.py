import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, ndimage

from longmri.brain_extract import dice
from longmri.errors import ClassCollapseError, DegenerateInputError, ParameterError
from longmri.hmrf import (GaussianClassParams, SegConfig, SegTrace, TissueProbabilityMaps, e_step, gaussian_pdf,
                          initialize_classes, log_objective, m_step, mrf_spatial_prior, save_maps, segment_hmrf,
                          smoothness_score)
from longmri.nifti_io import read_nifti
from longmri.volume import Volume3D
from oracles import oracle_em, oracle_loglik, oracle_responsibilities


def small_mixture(seed, shape=(10, 10, 10)):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, shape)
    data = np.array([500.0, 2000.0, 2500.0])[labels] + rng.normal(0, 150, shape)
    return Volume3D(data), np.ones(shape, bool)


# --- gaussian_pdf -----------------------------------------------------------------------------

def test_pdf_peak_and_one_sigma():
    peak = gaussian_pdf(3.0, 3.0, 1.0)
    assert peak == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert gaussian_pdf(5.0, 3.0, 2.0) == pytest.approx(gaussian_pdf(3.0, 3.0, 2.0) * math.exp(-0.5))


def test_pdf_integrates_to_one():
    x = np.linspace(-8, 8, 20001) * 7.0 + 40.0
    assert integrate.trapezoid(gaussian_pdf(x, 40.0, 7.0), x) == pytest.approx(1.0, abs=1e-6)


def test_pdf_floor():
    with pytest.raises(ParameterError):
        gaussian_pdf(0.0, 0.0, 0.5, sigma_floor=1.0)
    with pytest.raises(ParameterError):
        gaussian_pdf(0.0, 0.0, 0.0)


# --- initialization -------------------------------------------------------------------------

def test_init_on_phantom(phantom):
    vol, gt = phantom
    p = initialize_classes(vol.data[gt.brain_mask])
    np.testing.assert_allclose(p.mu, [500, 2000, 2500], rtol=0.10)
    assert np.all(np.diff(p.mu) > 0)


def test_init_delta_spikes():
    y = np.repeat([1.0, 2.0, 3.0], 50)
    p = initialize_classes(y)
    np.testing.assert_array_equal(p.mu, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(p.sigma, 1e-3 * 2.0)
    np.testing.assert_allclose(p.pi, 1 / 3)


@pytest.mark.parametrize("values", [np.full(20, 4.0), np.repeat([1.0, 2.0], 10)])
def test_init_degenerate(values):
    with pytest.raises(DegenerateInputError):
        initialize_classes(values)


# --- MRF prior --------------------------------------------------------------------------------

def _maps(q):
    return TissueProbabilityMaps(q, np.ones(q.shape[1:], bool))


def test_prior_uniform_at_beta_zero(rng):
    q = rng.dirichlet(np.ones(3), size=(4, 4, 4)).transpose(3, 0, 1, 2)
    np.testing.assert_allclose(mrf_spatial_prior(_maps(q), 0.0, (1, 2, 3)), [1 / 3] * 3)


def test_prior_follows_certain_neighbors():
    q = np.zeros((3, 3, 3, 3))
    q[1] = 1.0
    q[:, 1, 1, 1] = [1.0, 0.0, 0.0]
    assert np.argmax(mrf_spatial_prior(_maps(q), 0.4, (1, 1, 1))) == 1


@given(st.integers(0, 2**32 - 1), st.floats(0, 5), st.tuples(*[st.integers(0, 3)] * 3))
def test_prior_normalized(seed, beta, voxel):
    q = np.random.default_rng(seed).dirichlet(np.ones(3), size=(4, 4, 4)).transpose(3, 0, 1, 2)
    assert mrf_spatial_prior(_maps(q), beta, voxel).sum() == pytest.approx(1.0, abs=1e-12)


# --- E and M steps ----------------------------------------------------------------------------

def test_e_step_likelihood_dominance():
    vol = Volume3D(np.array([2000.0, 500.0, 2500.0]).reshape(3, 1, 1))
    params = GaussianClassParams([500, 2000, 2500], [100, 100, 100], [1 / 3] * 3)
    maps = e_step(vol, np.ones((3, 1, 1), bool), params, beta=0.0)
    assert np.argmax(maps.pve[:, 0, 0, 0]) == 1


def test_e_step_matches_oracle_at_beta_zero():
    vol, mask = small_mixture(1)
    params = GaussianClassParams([600, 1900, 2600], [200, 120, 90], [0.3, 0.3, 0.4])
    maps = e_step(vol, mask, params, beta=0.0)
    oracle = oracle_responsibilities(np.asarray(vol.data, np.float64).ravel(), params.mu, params.sigma, params.pi)
    np.testing.assert_allclose(maps.pve.reshape(3, -1).T, oracle, atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.floats(0, 2))
def test_e_step_simplex(seed, beta):
    rng = np.random.default_rng(seed)
    vol = Volume3D(rng.normal(1500, 800, (6, 6, 6)))
    mask = rng.random((6, 6, 6)) > 0.3
    if not mask.any():
        mask[0, 0, 0] = True
    params = GaussianClassParams([500, 2000, 2500], [100, 100, 100], [0.2, 0.5, 0.3])
    maps = e_step(vol, mask, params, None, beta, sweeps=2)
    np.testing.assert_allclose(maps.pve.sum(axis=0)[mask], 1.0, atol=1e-6)
    assert np.all(maps.pve[:, ~mask] == 0)
    assert np.all((maps.pve >= 0) & (maps.pve <= 1))


def test_e_step_rejects_non_finite():
    d = np.ones((2, 2, 2))
    d[0, 0, 0] = np.nan
    vol = Volume3D(d)
    params = GaussianClassParams([0, 1, 2], [1, 1, 1], [1 / 3] * 3)
    with pytest.raises(ParameterError):
        e_step(vol, np.ones((2, 2, 2), bool), params)


def test_m_step_hard_labels(phantom):
    vol, gt = phantom
    mask = gt.brain_mask
    q = np.stack([(gt.labels == k).astype(float) for k in (1, 2, 3)])
    q[:, ~mask] = 0
    p = m_step(vol, mask, TissueProbabilityMaps(q, mask))
    y = np.asarray(vol.data, np.float64)
    np.testing.assert_allclose(p.mu, [y[gt.labels == k].mean() for k in (1, 2, 3)], rtol=1e-9)
    np.testing.assert_allclose(p.sigma, [y[gt.labels == k].std() for k in (1, 2, 3)], rtol=1e-9)
    assert p.pi.sum() == pytest.approx(1.0, abs=1e-12)


def test_m_step_uniform_posteriors():
    vol, mask = small_mixture(2)
    q = np.full((3,) + vol.shape, 1 / 3)
    p = m_step(vol, mask, TissueProbabilityMaps(q, mask))
    np.testing.assert_allclose(p.mu, np.asarray(vol.data, np.float64).mean(), rtol=1e-12)


def test_m_step_sorts_and_relabels():
    vol, mask = small_mixture(3)
    params = GaussianClassParams([600, 1900, 2600], [200, 120, 90], [0.3, 0.3, 0.4])
    maps = e_step(vol, mask, params, beta=0.0)
    shuffled = maps.permuted([2, 0, 1])
    a, b = m_step(vol, mask, maps), m_step(vol, mask, shuffled)
    np.testing.assert_allclose(a.mu, b.mu, rtol=1e-12)
    assert np.all(np.diff(a.mu) > 0)


def test_m_step_collapse():
    vol, mask = small_mixture(4)
    q = np.zeros((3,) + vol.shape)
    q[0] = 0.5
    q[1] = 0.5
    with pytest.raises(ClassCollapseError):
        m_step(vol, mask, TissueProbabilityMaps(q, mask))


# --- full runs --------------------------------------------------------------------------------

def test_phantom_segmentation(phantom):
    vol, gt = phantom
    maps, params = segment_hmrf(vol, gt.brain_mask, SegConfig(beta=0.4))
    labels = maps.labels()
    for k in (1, 2, 3):
        assert dice(labels == k, gt.labels == k) >= 0.90
    np.testing.assert_allclose(params.mu, [500, 2000, 2500], rtol=0.02)
    np.testing.assert_allclose(maps.pve.sum(axis=0)[gt.brain_mask], 1.0, atol=1e-6)
    assert np.all(maps.pve[:, ~gt.brain_mask] == 0)


def test_noiseless_exact(clean_phantom):
    vol, gt = clean_phantom
    maps, _ = segment_hmrf(vol, gt.brain_mask)
    interior = ndimage.binary_erosion(gt.brain_mask)
    boundary = np.zeros_like(interior)
    for k in (1, 2, 3):
        region = gt.labels == k
        boundary |= region & ~ndimage.binary_erosion(region)
    keep = interior & ~boundary
    np.testing.assert_array_equal(maps.labels()[keep], gt.labels[keep])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_beta_zero_equals_gmm_oracle(seed):
    vol, mask = small_mixture(seed, (16, 16, 16))
    trace = SegTrace()
    maps, params = segment_hmrf(vol, mask, SegConfig(beta=0.0, iterations=15), trace)
    y = np.asarray(vol.data, np.float64).ravel()
    init = initialize_classes(y)
    floor = 1e-3 * (y.max() - y.min())
    resp, mu, sigma, pi = oracle_em(y, init.mu, init.sigma, init.pi, trace.iterations, floor)
    np.testing.assert_allclose(maps.pve.reshape(3, -1).T, resp, atol=1e-6)
    np.testing.assert_allclose(params.mu, mu, rtol=1e-9)
    assert np.all(np.diff(trace.log_likelihood) >= -1e-9)


def test_log_objective_matches_oracle():
    vol, mask = small_mixture(5)
    params = GaussianClassParams([600, 1900, 2600], [200, 120, 90], [0.3, 0.3, 0.4])
    maps = e_step(vol, mask, params, beta=0.0)
    y = np.asarray(vol.data, np.float64).ravel()
    assert log_objective(vol, mask, maps, params, 0.0) == pytest.approx(
        oracle_loglik(y, params.mu, params.sigma, params.pi), rel=1e-13, abs=1e-9)


def test_checkerboard_is_less_smooth():
    shape = (6, 6, 6)
    parity = np.indices(shape).sum(axis=0) % 2
    checker = np.stack([parity, 1 - parity, np.zeros(shape)]).astype(float)
    blocks = np.zeros_like(checker)
    blocks[0, :3] = 1
    blocks[1, 3:] = 1
    assert checker[0].sum() == blocks[0].sum()
    assert smoothness_score(_maps(checker)) < smoothness_score(_maps(blocks))


def test_deterministic(phantom):
    vol, gt = phantom
    a = segment_hmrf(vol, gt.brain_mask)[0].pve
    b = segment_hmrf(vol, gt.brain_mask)[0].pve
    assert a.tobytes() == b.tobytes()


def test_save_maps(tmp_path):
    vol, mask = small_mixture(6, (6, 6, 6))
    maps, _ = segment_hmrf(vol, mask)
    paths = save_maps(maps, vol, tmp_path / "visit1")
    assert [p.name for p in paths] == [f"visit1_pve{k}.nii.gz" for k in range(3)]
    np.testing.assert_allclose(read_nifti(paths[1]).data, maps.pve[1], atol=1e-7)


def test_config_validation():
    with pytest.raises(ParameterError):
        SegConfig(iterations=0)
    with pytest.raises(ParameterError):
        SegConfig(beta=-1)
