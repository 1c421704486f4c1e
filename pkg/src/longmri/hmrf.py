"""Three-class tissue segmentation with a Gaussian hidden Markov random field.

Each masked voxel intensity ``y_i`` is modeled by a mixture of 1-D Gaussians
(one per tissue) whose prior is modulated by the current soft labels of the
six face neighbors (mean-field approximation of the MRF)::

    p_il ∝ π_l · exp(β Σ_{j∈N6(i)} q_j(l)) · g(y_i; μ_l, σ_l)

Parameters are re-estimated by the usual weighted moments (M step). With
``β = 0`` the procedure is exactly EM for a Gaussian mixture. Classes are
kept sorted by mean so map 0 is CSF, 1 is GM and 2 is WM.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClassCollapseError, DegenerateInputError, EmptyInputError, ParameterError, ShapeError
from .nifti_io import write_nifti
from .volume import Volume3D

N_CLASSES = 3
TISSUES = ("csf", "gm", "wm")
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianClassParams:
    mu: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        for name in ("mu", "sigma", "pi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).copy())
        if not (self.mu.shape == self.sigma.shape == self.pi.shape):
            raise ShapeError("mu, sigma and pi must have equal length")
        if np.any(self.sigma <= 0):
            raise ParameterError("class standard deviations must be positive")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1) > 1e-9:
            raise ParameterError(f"mixing weights must be a probability vector, got {self.pi}")

    @property
    def k(self) -> int:
        return self.mu.size

    def sorted(self) -> tuple["GaussianClassParams", np.ndarray]:
        """Copy sorted by ascending mean, plus the permutation used."""
        order = np.argsort(self.mu, kind="stable")
        return GaussianClassParams(self.mu[order], self.sigma[order], self.pi[order]), order

    def to_json(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "pi": self.pi.tolist()}


@dataclass(frozen=True, eq=False)
class TissueProbabilityMaps:
    """Posterior maps stacked as ``pve[k, i, j, l]``; zero outside the mask."""

    pve: np.ndarray
    mask: np.ndarray

    @property
    def pve_0(self) -> np.ndarray:
        return self.pve[0]

    @property
    def pve_1(self) -> np.ndarray:
        return self.pve[1]

    @property
    def pve_2(self) -> np.ndarray:
        return self.pve[2]

    def labels(self) -> np.ndarray:
        """Argmax labels 1..K inside the mask, 0 outside."""
        out = np.argmax(self.pve, axis=0).astype(np.int8) + 1
        out[~self.mask] = 0
        return out

    def permuted(self, order) -> "TissueProbabilityMaps":
        return TissueProbabilityMaps(self.pve[np.asarray(order)], self.mask)


@dataclass(frozen=True)
class SegConfig:
    beta: float = 0.4
    iterations: int = 20
    sweeps: int = 2
    sigma_floor: float | None = None  # None: 1e-3 x masked intensity range
    init: str = "kmeans"
    tol_rel: float = 1e-4

    def __post_init__(self):
        if self.beta < 0:
            raise ParameterError("beta must be >= 0")
        if self.iterations < 1 or self.sweeps < 1:
            raise ParameterError("iterations and sweeps must be >= 1")
        if self.init != "kmeans":
            raise ParameterError(f"unknown init method {self.init!r}")


def gaussian_pdf(y, mu, sigma, sigma_floor: float = 0.0):
    """Normal density ``N(y; mu, sigma^2)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or np.any(sigma < sigma_floor):
        raise ParameterError(f"sigma {sigma} is below the floor {sigma_floor}")
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi))


def _log_gaussian(y: np.ndarray, params: GaussianClassParams) -> np.ndarray:
    """``(N, K)`` matrix of ``log π_l + log g(y_i; θ_l)``."""
    z = (y[:, None] - params.mu[None, :]) / params.sigma[None, :]
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    return log_pi[None, :] - np.log(params.sigma)[None, :] - _LOG_SQRT_2PI - 0.5 * z * z


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def default_sigma_floor(y: np.ndarray) -> float:
    rng = float(np.max(y) - np.min(y))
    return 1e-3 * rng if rng > 0 else 1e-6


def initialize_classes(intensities, k: int = N_CLASSES, sigma_floor: float | None = None,
                       max_iter: int = 100) -> GaussianClassParams:
    """1-D k-means seeded at evenly spaced percentiles (25/50/75 for three classes)."""
    y = np.asarray(intensities, dtype=np.float64).ravel()
    if np.unique(y).size < k:
        raise DegenerateInputError(f"need at least {k} distinct intensities")
    floor = default_sigma_floor(y) if sigma_floor is None else sigma_floor
    centers = np.percentile(y, 100.0 * np.arange(1, k + 1) / (k + 1))
    if np.unique(centers).size < k:
        uniq = np.unique(y)
        centers = uniq[np.linspace(0, uniq.size - 1, k).round().astype(int)]
    for _ in range(max_iter):
        edges = 0.5 * (centers[1:] + centers[:-1])
        labels = np.searchsorted(edges, y)
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=y, minlength=k)
        new = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        new = np.sort(new)
        if np.array_equal(new, centers):
            break
        centers = new
    edges = 0.5 * (centers[1:] + centers[:-1])
    labels = np.searchsorted(edges, y)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise DegenerateInputError("k-means initialization produced an empty class")
    mu = np.bincount(labels, weights=y, minlength=k) / counts
    var = np.bincount(labels, weights=(y - mu[labels]) ** 2, minlength=k) / counts
    sigma = np.maximum(np.sqrt(var), floor)
    return GaussianClassParams(mu, sigma, counts / counts.sum())


def neighbor_sums(q: np.ndarray) -> np.ndarray:
    """Sum of ``q`` over the 6 face neighbors; voxels beyond the grid contribute 0.

    ``q`` has shape ``(K, nx, ny, nz)``.
    """
    s = np.zeros_like(q)
    s[:, 1:] += q[:, :-1]
    s[:, :-1] += q[:, 1:]
    s[:, :, 1:] += q[:, :, :-1]
    s[:, :, :-1] += q[:, :, 1:]
    s[:, :, :, 1:] += q[:, :, :, :-1]
    s[:, :, :, :-1] += q[:, :, :, 1:]
    return s


def mrf_spatial_prior(posteriors: TissueProbabilityMaps, beta: float, voxel) -> np.ndarray:
    """Normalized ``exp(β Σ_{j∈N6} q_j(l))`` at one voxel index."""
    q = posteriors.pve
    i, j, k = (int(v) for v in voxel)
    total = np.zeros(q.shape[0])
    for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        a, b, c = i + di, j + dj, k + dk
        if 0 <= a < q.shape[1] and 0 <= b < q.shape[2] and 0 <= c < q.shape[3]:
            total += q[:, a, b, c]
    logits = beta * total
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _masked_values(vol: Volume3D, mask) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match volume {vol.shape}")
    if not mask.any():
        raise EmptyInputError("segmentation mask is empty")
    y = np.asarray(vol.data, dtype=np.float64)[mask]
    if not np.all(np.isfinite(y)):
        raise ParameterError("non-finite intensities inside the mask")
    return mask, y


def e_step(vol: Volume3D, mask, params: GaussianClassParams,
           prev: TissueProbabilityMaps | None = None, beta: float = 0.4, sweeps: int = 2
           ) -> TissueProbabilityMaps:
    """Mean-field posteriors, computed in log space.

    With no ``prev`` the neighbor field starts from the plain mixture
    responsibilities. Every sweep updates all voxels simultaneously from the
    previous sweep's posteriors, so the result does not depend on visit order.
    """
    mask, y = _masked_values(vol, mask)
    loglik = _log_gaussian(y, params)
    q = np.zeros((params.k,) + vol.shape)
    if prev is None or beta == 0:
        q[:, mask] = _softmax_rows(loglik).T
        if beta == 0:
            return TissueProbabilityMaps(q, mask)
    else:
        q[:] = prev.pve
    for _ in range(sweeps):
        field_ = neighbor_sums(q)[:, mask].T
        new = np.zeros_like(q)
        new[:, mask] = _softmax_rows(loglik + beta * field_).T
        q = new
    return TissueProbabilityMaps(q, mask)


def _m_step_unsorted(y: np.ndarray, resp: np.ndarray, sigma_floor: float) -> GaussianClassParams:
    n = y.size
    nk = resp.sum(axis=0)
    if np.any(nk < 1e-12 * n):
        raise ClassCollapseError(f"a tissue class vanished (weights {nk})")
    mu = resp.T @ y / nk
    var = np.einsum("ik,ik->k", resp, (y[:, None] - mu[None, :]) ** 2) / nk
    sigma = np.maximum(np.sqrt(var), sigma_floor)
    pi = nk / nk.sum()
    return GaussianClassParams(mu, sigma, pi)


def m_step(vol: Volume3D, mask, posteriors: TissueProbabilityMaps,
           sigma_floor: float | None = None) -> GaussianClassParams:
    """Weighted mean, standard deviation (floored) and mixing weight per class, sorted by mean."""
    mask, y = _masked_values(vol, mask)
    floor = default_sigma_floor(y) if sigma_floor is None else sigma_floor
    params, _ = _m_step_unsorted(y, posteriors.pve[:, mask].T, floor).sorted()
    return params


def gmm_log_likelihood(y: np.ndarray, params: GaussianClassParams) -> float:
    return float(_logsumexp_rows(_log_gaussian(y, params)).sum())


def smoothness_score(posteriors: TissueProbabilityMaps) -> float:
    """``Σ_i Σ_{j∈N6(i)} Σ_l q_i(l) q_j(l)`` (each neighbor pair counted from both ends)."""
    q = posteriors.pve
    return float(np.sum(q * neighbor_sums(q)))


def log_objective(vol: Volume3D, mask, posteriors: TissueProbabilityMaps,
                  params: GaussianClassParams, beta: float) -> float:
    """Mixture log-likelihood plus ``beta`` times the neighbor-agreement score."""
    _, y = _masked_values(vol, mask)
    value = gmm_log_likelihood(y, params)
    if beta:
        value += beta * smoothness_score(posteriors)
    return value


@dataclass
class SegTrace:
    iterations: int = 0
    converged: bool = False
    log_likelihood: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)


def segment_hmrf(vol: Volume3D, mask, config: SegConfig | None = None, trace: SegTrace | None = None
                 ) -> tuple[TissueProbabilityMaps, GaussianClassParams]:
    """Run HMRF-EM; returns maps (CSF, GM, WM order) and the final parameters.

    The loop alternates E and M steps for ``config.iterations`` rounds or
    until every class mean moves by less than ``tol_rel`` times the masked
    intensity range. The returned maps are the posteriors of the last E step.
    Pass a :class:`SegTrace` to record per-iteration objectives.
    """
    config = config or SegConfig()
    mask, y = _masked_values(vol, mask)
    floor = default_sigma_floor(y) if config.sigma_floor is None else config.sigma_floor
    tol = config.tol_rel * float(y.max() - y.min())

    params = initialize_classes(y, N_CLASSES, floor)
    trace = trace if trace is not None else SegTrace()
    maps = None
    for it in range(1, config.iterations + 1):
        maps = e_step(vol, mask, params, maps, config.beta, config.sweeps)
        new, order = _m_step_unsorted(y, maps.pve[:, mask].T, floor).sorted()
        maps = maps.permuted(order)
        trace.log_likelihood.append(gmm_log_likelihood(y, new))
        trace.objective.append(trace.log_likelihood[-1] + config.beta * smoothness_score(maps))
        shift = float(np.max(np.abs(new.mu - params.mu)))
        params = new
        trace.iterations = it
        if shift < tol:
            trace.converged = True
            break
    return maps, params


def save_maps(maps: TissueProbabilityMaps, reference: Volume3D, stem) -> list:
    """Write ``<stem>_pve0/1/2.nii.gz`` on the reference geometry; returns the paths."""
    paths = []
    for k in range(maps.pve.shape[0]):
        path = Path(f"{stem}_pve{k}.nii.gz")
        write_nifti(reference.with_data(maps.pve[k].astype(np.float32)), path)
        paths.append(path)
    return paths
