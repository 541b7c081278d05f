"""Probabilistic PCA: isotropic-noise factor analysis with closed forms.

With noise pinned to sigma2 * I the maximum-likelihood loading comes straight
from the eigendecomposition of the sample covariance: take the top-p
eigenvectors, scale columns by sqrt(eigenvalue - sigma2), and set sigma2 to
the mean of the discarded eigenvalues.  An EM route (shared with factor
analysis, noise update averaged to a scalar) is kept alongside as the
iterative alternative, the classical PCA projection is the zero-noise limit,
and the d x d marginal precision is produced through the rank-p Woodbury
shortcut so only a p x p system is ever factorized.

The eigendecomposition is an in-repo cyclic Jacobi sweep with a fixed sign
and tie-breaking convention, so fitted loadings are reproducible bit-for-bit
across runs and platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import gaussian
from .factor_analysis import (
    FactorAnalysisError,
    FitConfig,
    FitTrace,
    NOISE_FLOOR,
    _check_data,
    _init_params,
    _m_step_moments,
    _posterior_moments,
)
from .gaussian import GaussianFull, spd_cholesky

#: sigma2 is floored here when the data are exactly low rank
SIGMA2_FLOOR = 1e-12


class PpcaError(ValueError):
    """Invalid PPCA model, data, or configuration."""


@dataclass(frozen=True)
class PpcaModel:
    """Loading (d, p), offset (d,), scalar noise variance sigma2 > 0."""

    loading: np.ndarray
    offset: np.ndarray
    sigma2: float
    rank_warning: bool = False

    def __post_init__(self):
        loading = np.asarray(self.loading, dtype=np.float64)
        offset = np.asarray(self.offset, dtype=np.float64)
        if loading.ndim != 2:
            raise PpcaError("loading must be a (d, p) matrix")
        d, p = loading.shape
        if p >= d:
            raise PpcaError(f"latent dim {p} must be < data dim {d}")
        if offset.shape != (d,):
            raise PpcaError("offset must have length d")
        if not (np.all(np.isfinite(loading)) and np.all(np.isfinite(offset))):
            raise PpcaError("model parameters must be finite")
        if not self.sigma2 > 0.0:
            raise PpcaError("sigma2 must be positive")
        object.__setattr__(self, "loading", loading)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def data_dim(self) -> int:
        return self.loading.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.loading.shape[1]

    def noise_diag(self) -> np.ndarray:
        """The equivalent diagonal-noise vector sigma2 * ones(d)."""
        return np.full(self.data_dim, self.sigma2)


@dataclass(frozen=True)
class EigenResult:
    """Descending eigenvalues and orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if np.any(np.diff(values) > 0):
            raise PpcaError("eigenvalues must be in descending order")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "vectors", vectors)


def eigh_symmetric(a, tol: float = 1e-10, max_sweeps: int = 64) -> EigenResult:
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    Sweeps Givens rotations over all (i, j) pairs until the off-diagonal
    Frobenius mass falls below tol times the matrix norm.  Output order is
    descending by eigenvalue; exact ties are broken by the lexicographically
    larger eigenvector column, and each column is flipped so its
    largest-magnitude entry is positive.  Both conventions exist purely to
    make repeated runs bit-identical.
    """
    a = gaussian.symmetrize(np.asarray(a, dtype=np.float64))
    d = a.shape[0]
    work = a.copy()
    vecs = np.eye(d)
    norm = float(np.linalg.norm(work))
    if norm == 0.0:
        norm = 1.0
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(work**2) - np.sum(np.diag(work) ** 2), 0.0))
        if off <= tol * norm:
            break
        for i in range(d - 1):
            for j in range(i + 1, d):
                aij = work[i, j]
                if abs(aij) <= 1e-300:
                    continue
                theta = (work[j, j] - work[i, i]) / (2.0 * aij)
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # two-sided rotation in the (i, j) plane
                row_i, row_j = work[i, :].copy(), work[j, :].copy()
                work[i, :] = c * row_i - s * row_j
                work[j, :] = s * row_i + c * row_j
                col_i, col_j = work[:, i].copy(), work[:, j].copy()
                work[:, i] = c * col_i - s * col_j
                work[:, j] = s * col_i + c * col_j
                work[i, j] = 0.0
                work[j, i] = 0.0
                vec_i, vec_j = vecs[:, i].copy(), vecs[:, j].copy()
                vecs[:, i] = c * vec_i - s * vec_j
                vecs[:, j] = s * vec_i + c * vec_j
    values = np.diag(work).copy()

    # deterministic ordering: descending value, ties by larger column
    def _key(idx):
        return (-values[idx], tuple(-vecs[:, idx]))

    order = sorted(range(d), key=_key)
    values = values[order]
    vecs = vecs[:, order]
    # sign convention: largest-magnitude entry of each column positive
    for j in range(d):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return EigenResult(values, vecs)


def _sample_covariance(data):
    mu = np.mean(data, axis=0)
    centered = data - mu
    return mu, (centered.T @ centered) / data.shape[0]


def fit_mle(data, p: int, rotation=None) -> PpcaModel:
    """Closed-form maximum-likelihood fit.

    sigma2 is the mean of the d-p trailing eigenvalues of the sample
    covariance (the variance lost by the projection); the loading is
    U_p (Delta_p - sigma2 I)^(1/2) R with R an optional orthogonal factor.
    Eigenvalues below sigma2 clamp the square root at zero; exactly
    low-rank data floor sigma2 at 1e-12 and set ``rank_warning``.
    """
    data = _check_data(data)
    n, d = data.shape
    p = int(p)
    if not 1 <= p < d:
        raise PpcaError(f"latent dim must satisfy 1 <= p < d={d}")
    if n < 2:
        raise PpcaError("need at least 2 data points")
    mu, s_x = _sample_covariance(data)
    eig = eigh_symmetric(s_x)
    sigma2 = float(np.mean(eig.values[p:]))
    rank_warning = False
    if sigma2 < SIGMA2_FLOOR:
        sigma2 = SIGMA2_FLOOR
        rank_warning = True
    scale = np.sqrt(np.maximum(eig.values[:p] - sigma2, 0.0))
    loading = eig.vectors[:, :p] * scale
    if rotation is not None:
        rotation = np.asarray(rotation, dtype=np.float64)
        if rotation.shape != (p, p):
            raise PpcaError(f"rotation must be ({p}, {p})")
        if float(np.max(np.abs(rotation.T @ rotation - np.eye(p)))) > 1e-9:
            raise PpcaError("rotation must be orthogonal")
        loading = loading @ rotation
    return PpcaModel(loading, mu, sigma2, rank_warning)


def fit_em(data, p: int, config: FitConfig = FitConfig()):
    """Iterative fit: factor-analysis EM with the isotropic constraint.

    The only change from the FA loop is the noise update, which averages
    the per-dimension noise diagonal into a single scalar.
    """
    data = _check_data(data)
    n, d = data.shape
    p = int(p)
    if not 1 <= p < d:
        raise PpcaError(f"latent dim must satisfy 1 <= p < d={d}")
    if n < 2:
        raise PpcaError("need at least 2 data points")
    mu = np.mean(data, axis=0)
    if config.center:
        work = data - mu
        shift = np.zeros(d)
    else:
        work = data
        shift = mu

    loading, noise0 = _init_params(data, p, config.seed)
    sigma2 = max(float(np.mean(noise0)), NOISE_FLOOR)
    trace = FitTrace()
    ll = log_likelihood(PpcaModel(loading, mu, sigma2), data)
    trace.loglik_per_iter.append(ll)
    for _ in range(config.max_iter):
        centered = work - shift
        means, cov = _posterior_moments(
            loading, np.full(d, sigma2), centered
        )
        loading, noise_raw = _m_step_moments(centered, means, cov)
        sigma2 = max(float(np.mean(noise_raw)), NOISE_FLOOR)
        ll_new = log_likelihood(PpcaModel(loading, mu, sigma2), data)
        trace.loglik_per_iter.append(ll_new)
        trace.iterations_run += 1
        if abs(ll_new - ll) <= config.rel_tol * max(1.0, abs(ll)):
            trace.converged = True
            ll = ll_new
            break
        ll = ll_new
    return PpcaModel(loading, mu, sigma2), trace


def inverse_c(model: PpcaModel) -> np.ndarray:
    """Inverse of C = loading loading^T + sigma2 I by the rank-p shortcut.

    Computed as (I - loading M^{-1} loading^T) / sigma2 with
    M = loading^T loading + sigma2 I; only the p x p M is factorized.
    """
    lam = model.loading
    d, p = lam.shape
    m = lam.T @ lam + model.sigma2 * np.eye(p)
    chol = spd_cholesky(0.5 * (m + m.T))
    m_inv_lt = cho_solve((chol, True), lam.T)
    c_inv = (np.eye(d) - lam @ m_inv_lt) / model.sigma2
    return 0.5 * (c_inv + c_inv.T)


def posterior(model: PpcaModel, x) -> GaussianFull:
    """Posterior of z given x: N(loading^T C^{-1} (x - offset), sigma2 M^{-1}).

    The mean uses the Woodbury inverse of C directly; the covariance
    I - loading^T C^{-1} loading is evaluated in its algebraically equal
    form sigma2 M^{-1}, which stays positive definite as sigma2 -> 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.data_dim,):
        raise PpcaError(f"x must have shape ({model.data_dim},), got {x.shape}")
    lam = model.loading
    p = model.latent_dim
    mean = lam.T @ (inverse_c(model) @ (x - model.offset))
    m = lam.T @ lam + model.sigma2 * np.eye(p)
    chol = spd_cholesky(0.5 * (m + m.T))
    cov = model.sigma2 * cho_solve((chol, True), np.eye(p))
    return GaussianFull(mean, 0.5 * (cov + cov.T))


def zero_noise_projection(model: PpcaModel, data) -> np.ndarray:
    """Deterministic limit projection (loading^T loading)^{-1} loading^T (x - offset).

    In the zero-noise limit the posterior covariance vanishes and the mean
    becomes this pseudo-inverse projection; requires full column rank.
    """
    data = _check_data(data, model.data_dim)
    lam = model.loading
    gram = lam.T @ lam
    try:
        chol = spd_cholesky(0.5 * (gram + gram.T))
    except gaussian.NotPositiveDefiniteError as exc:
        raise PpcaError("loading must have full column rank") from exc
    return cho_solve((chol, True), lam.T @ (data - model.offset).T).T


def pca_baseline(data, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Classical PCA: top-p eigenvectors of the sample covariance.

    Returns (components (d, p) with orthonormal columns, explained_variance
    (p,) eigenvalues).
    """
    data = _check_data(data)
    n, d = data.shape
    p = int(p)
    if not 1 <= p < d:
        raise PpcaError(f"latent dim must satisfy 1 <= p < d={d}")
    if n < 2:
        raise PpcaError("need at least 2 data points")
    _, s_x = _sample_covariance(data)
    eig = eigh_symmetric(s_x)
    return eig.vectors[:, :p].copy(), eig.values[:p].copy()


def log_likelihood(model: PpcaModel, data) -> float:
    """Sum of log N(x | offset, loading loading^T + sigma2 I) over rows."""
    data = _check_data(data, model.data_dim)
    cov = model.loading @ model.loading.T + model.sigma2 * np.eye(model.data_dim)
    marg = GaussianFull(model.offset, 0.5 * (cov + cov.T))
    return float(np.sum(gaussian.log_density_batch(marg, data)))


def to_dict(model: PpcaModel) -> dict:
    """JSON-ready form with the fixed ppca field names."""
    return {
        "type": "ppca",
        "d": model.data_dim,
        "p": model.latent_dim,
        "loading": model.loading.tolist(),
        "offset": model.offset.tolist(),
        "sigma2": model.sigma2,
        "rank_warning": bool(model.rank_warning),
    }


def from_dict(obj: dict) -> PpcaModel:
    if obj.get("type") != "ppca":
        raise PpcaError(f"not a ppca payload: {obj.get('type')}")
    model = PpcaModel(
        np.asarray(obj["loading"], dtype=np.float64),
        np.asarray(obj["offset"], dtype=np.float64),
        float(obj["sigma2"]),
        bool(obj.get("rank_warning", False)),
    )
    if model.data_dim != obj["d"] or model.latent_dim != obj["p"]:
        raise PpcaError("declared dimensions disagree with arrays")
    return model


@dataclass(frozen=True)
class PcaBaseline:
    """Deterministic PCA projection kept alongside the probabilistic fits."""

    components: np.ndarray
    explained_variance: np.ndarray
    offset: np.ndarray

    @property
    def data_dim(self) -> int:
        return self.components.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.components.shape[1]


def fit_pca(data, p: int) -> PcaBaseline:
    """pca_baseline plus the column mean, packaged for persistence."""
    data = _check_data(data)
    components, explained = pca_baseline(data, p)
    return PcaBaseline(components, explained, np.mean(data, axis=0))


def pca_transform(model: PcaBaseline, data) -> np.ndarray:
    data = _check_data(data, model.data_dim)
    return (data - model.offset) @ model.components


def pca_to_dict(model: PcaBaseline) -> dict:
    return {
        "type": "pca",
        "d": model.data_dim,
        "p": model.latent_dim,
        "components": model.components.tolist(),
        "explained_variance": model.explained_variance.tolist(),
        "offset": model.offset.tolist(),
    }


def pca_from_dict(obj: dict) -> PcaBaseline:
    if obj.get("type") != "pca":
        raise PpcaError(f"not a pca payload: {obj.get('type')}")
    return PcaBaseline(
        np.asarray(obj["components"], dtype=np.float64),
        np.asarray(obj["explained_variance"], dtype=np.float64),
        np.asarray(obj["offset"], dtype=np.float64),
    )
