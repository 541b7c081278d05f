"""Factor analysis: linear-Gaussian generative model and its EM fit.

The model generates x = loading @ z + offset + noise with z standard normal
in p dimensions and independent per-coordinate Gaussian noise, so the
marginal of x is N(offset, loading loading^T + diag(noise)).  The posterior
over z given x is Gaussian with an x-independent covariance; EM alternates
that posterior computation with closed-form updates of the loading matrix
and the noise diagonal.

Conventions baked in here:

* The latent second moment used by the M-step is cov + mean mean^T (the full
  E[z z^T] under the posterior), not the posterior covariance alone; EM is
  not monotone otherwise.
* The loading update is
  [sum_i (x_i - mu) mean_i^T] [sum_i second_moment_i]^{-1}; the noise
  precision that appears on both sides of the stationarity condition cancels.
* No rotation fixing: the loading is identified only up to a right-orthogonal
  factor, so accuracy is judged on loading loading^T + noise or on subspaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import gaussian
from .gaussian import GaussianFull, spd_cholesky
from .rng import Rng

#: noise variances are floored here to prevent degenerate collapse
NOISE_FLOOR = 1e-10


class FactorAnalysisError(ValueError):
    """Invalid model, data, or configuration."""


@dataclass(frozen=True)
class FactorModel:
    """Loading (d, p), offset (d,), strictly positive noise diagonal (d,)."""

    loading: np.ndarray
    offset: np.ndarray
    noise_diag: np.ndarray

    def __post_init__(self):
        loading = np.asarray(self.loading, dtype=np.float64)
        offset = np.asarray(self.offset, dtype=np.float64)
        noise = np.asarray(self.noise_diag, dtype=np.float64)
        if loading.ndim != 2:
            raise FactorAnalysisError("loading must be a (d, p) matrix")
        d, p = loading.shape
        if p > d:
            raise FactorAnalysisError(f"latent dim {p} exceeds data dim {d}")
        if offset.shape != (d,) or noise.shape != (d,):
            raise FactorAnalysisError("offset/noise_diag must have length d")
        if not (
            np.all(np.isfinite(loading))
            and np.all(np.isfinite(offset))
            and np.all(np.isfinite(noise))
        ):
            raise FactorAnalysisError("model parameters must be finite")
        if np.any(noise <= 0.0):
            raise FactorAnalysisError("noise variances must be positive")
        object.__setattr__(self, "loading", loading)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "noise_diag", noise)

    @property
    def data_dim(self) -> int:
        return self.loading.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.loading.shape[1]


@dataclass(frozen=True)
class LatentPosterior:
    """Posterior moments of z given one data point.

    ``second_moment`` is cov + mean mean^T -- the quantity the M-step needs.
    """

    mean: np.ndarray
    cov: np.ndarray
    second_moment: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        sm = np.asarray(self.second_moment, dtype=np.float64)
        p = mean.size
        if cov.shape != (p, p) or sm.shape != (p, p):
            raise FactorAnalysisError("posterior moment shapes inconsistent")
        if float(np.max(np.abs(sm - (cov + np.outer(mean, mean))))) > 1e-10:
            raise FactorAnalysisError(
                "second_moment must equal cov + mean mean^T within 1e-10"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "second_moment", 0.5 * (sm + sm.T))

    @classmethod
    def from_moments(cls, mean, cov) -> "LatentPosterior":
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        return cls(mean, cov, cov + np.outer(mean, mean))


@dataclass(frozen=True)
class FitConfig:
    """EM stopping rule and initialization seed."""

    max_iter: int = 500
    rel_tol: float = 1e-7
    seed: int = 0
    center: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise FactorAnalysisError("max_iter must be >= 1")
        if not self.rel_tol > 0.0:
            raise FactorAnalysisError("rel_tol must be > 0")


@dataclass
class FitTrace:
    """Per-iteration log-likelihoods; entry 0 is the initial model."""

    loglik_per_iter: list[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False


def marginal_x(model: FactorModel) -> GaussianFull:
    """Marginal of the data: N(offset, loading loading^T + diag(noise))."""
    cov = model.loading @ model.loading.T + np.diag(model.noise_diag)
    return GaussianFull(model.offset, 0.5 * (cov + cov.T))


def log_likelihood(model: FactorModel, data) -> float:
    """Sum of marginal log densities over the rows of data."""
    data = _check_data(data, model.data_dim)
    return float(np.sum(gaussian.log_density_batch(marginal_x(model), data)))


def _posterior_moments(loading, noise_diag, centered):
    """Posterior means for centered rows plus the shared covariance.

    Solves with G = loading loading^T + diag(noise) once; the covariance is
    x-independent so it is computed a single time per call.
    """
    d, p = loading.shape
    g = loading @ loading.T + np.diag(noise_diag)
    chol = spd_cholesky(g)
    # G^{-1} [loading | centered^T] in one pair of triangular solves
    rhs = np.hstack([loading, centered.T])
    w = solve_triangular(chol, rhs, lower=True)
    w = solve_triangular(chol.T, w, lower=False)
    g_inv_loading = w[:, :p]
    means = (loading.T @ w[:, p:]).T
    cov = np.eye(p) - loading.T @ g_inv_loading
    return means, 0.5 * (cov + cov.T)


def e_step(model: FactorModel, x) -> LatentPosterior:
    """Posterior moments of the latent variable for a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.data_dim,):
        raise FactorAnalysisError(
            f"x must have shape ({model.data_dim},), got {x.shape}"
        )
    means, cov = _posterior_moments(
        model.loading, model.noise_diag, (x - model.offset)[None, :]
    )
    return LatentPosterior.from_moments(means[0], cov)


def _m_step_moments(centered, means, cov_shared):
    """Closed-form parameter updates from posterior moments.

    Returns the new loading and the *unfloored* noise diagonal; callers
    decide how to constrain the noise (diagonal FA vs isotropic).
    """
    n = centered.shape[0]
    sum_cross = centered.T @ means                      # sum (x-mu) mean^T
    sum_second = n * cov_shared + means.T @ means       # sum E[z z^T]
    try:
        chol = spd_cholesky(0.5 * (sum_second + sum_second.T))
    except gaussian.NotPositiveDefiniteError as exc:
        raise FactorAnalysisError(
            "accumulated latent second moment is singular; "
            "try a smaller latent dimension p"
        ) from exc
    loading_new = cho_solve((chol, True), sum_cross.T).T
    projected = means @ loading_new.T                   # rows: loading @ mean_i
    quad_diag = np.einsum(
        "ij,jk,ik->i", loading_new, sum_second, loading_new
    )
    noise_new = (
        np.sum(centered**2, axis=0)
        - 2.0 * np.sum(projected * centered, axis=0)
        + quad_diag
    ) / n
    return loading_new, noise_new


def m_step(data, posteriors, mu) -> tuple[np.ndarray, np.ndarray]:
    """One M-step from explicit posteriors; returns (loading, noise_diag)."""
    data = np.asarray(data, dtype=np.float64)
    posteriors = list(posteriors)
    if len(posteriors) != data.shape[0]:
        raise FactorAnalysisError("need one posterior per data row")
    mu = np.asarray(mu, dtype=np.float64)
    centered = data - mu
    means = np.stack([q.mean for q in posteriors])
    # arbitrary per-point covariances: fold them into the shared-cov term
    cov_mean = np.mean([q.cov for q in posteriors], axis=0)
    loading_new, noise_new = _m_step_moments(centered, means, cov_mean)
    return loading_new, np.maximum(noise_new, NOISE_FLOOR)


def _check_data(data, d=None):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise FactorAnalysisError("data must be an (n, d) matrix")
    if not np.all(np.isfinite(data)):
        raise FactorAnalysisError("data contains non-finite values")
    if d is not None and data.shape[1] != d:
        raise FactorAnalysisError(
            f"data has {data.shape[1]} columns, model expects {d}"
        )
    return data


def _init_params(data, p, seed):
    rand = Rng(seed)
    loading = 0.1 * rand.normal((data.shape[1], p))
    noise = np.maximum(np.var(data, axis=0), NOISE_FLOOR)
    return loading, noise


def fit_em(data, p: int, config: FitConfig = FitConfig()):
    """Fit a FactorModel by EM; returns (model, trace).

    The offset is fixed to the column mean.  With ``config.center`` the data
    are centered once up front and all iterations run on the centered matrix;
    otherwise the offset is subtracted inside each step.  Both paths compute
    identical updates.
    """
    data = _check_data(data)
    n, d = data.shape
    p = int(p)
    if n < 2:
        raise FactorAnalysisError("need at least 2 data points")
    if not 1 <= p < d:
        raise FactorAnalysisError(f"latent dim must satisfy 1 <= p < d={d}")
    mu = np.mean(data, axis=0)
    if config.center:
        work = data - mu
        shift = np.zeros(d)
    else:
        work = data
        shift = mu

    loading, noise = _init_params(data, p, config.seed)
    trace = FitTrace()
    ll = log_likelihood(FactorModel(loading, mu, noise), data)
    trace.loglik_per_iter.append(ll)
    for _ in range(config.max_iter):
        centered = work - shift
        means, cov = _posterior_moments(loading, noise, centered)
        loading, noise_raw = _m_step_moments(centered, means, cov)
        noise = np.maximum(noise_raw, NOISE_FLOOR)
        ll_new = log_likelihood(FactorModel(loading, mu, noise), data)
        trace.loglik_per_iter.append(ll_new)
        trace.iterations_run += 1
        if abs(ll_new - ll) <= config.rel_tol * max(1.0, abs(ll)):
            trace.converged = True
            ll = ll_new
            break
        ll = ll_new
    return FactorModel(loading, mu, noise), trace


def sample_data(model: FactorModel, n: int, rand: Rng) -> np.ndarray:
    """Generate n rows: loading @ z + offset + noise, z standard normal."""
    n = int(n)
    if n < 1:
        raise FactorAnalysisError("n must be >= 1")
    z = rand.normal((n, model.latent_dim))
    eps = rand.normal((n, model.data_dim)) * np.sqrt(model.noise_diag)
    return z @ model.loading.T + model.offset + eps


def transform(model: FactorModel, data) -> np.ndarray:
    """Posterior mean of z for every row of data (n, p)."""
    data = _check_data(data, model.data_dim)
    means, _ = _posterior_moments(
        model.loading, model.noise_diag, data - model.offset
    )
    return means


def to_dict(model: FactorModel) -> dict:
    """JSON-ready form: {"type":"fa","d","p","loading","offset","noise_diag"}."""
    return {
        "type": "fa",
        "d": model.data_dim,
        "p": model.latent_dim,
        "loading": model.loading.tolist(),
        "offset": model.offset.tolist(),
        "noise_diag": model.noise_diag.tolist(),
    }


def from_dict(obj: dict) -> FactorModel:
    if obj.get("type") != "fa":
        raise FactorAnalysisError(f"not a factor model payload: {obj.get('type')}")
    model = FactorModel(
        np.asarray(obj["loading"], dtype=np.float64),
        np.asarray(obj["offset"], dtype=np.float64),
        np.asarray(obj["noise_diag"], dtype=np.float64),
    )
    if model.data_dim != obj["d"] or model.latent_dim != obj["p"]:
        raise FactorAnalysisError("declared dimensions disagree with arrays")
    return model
