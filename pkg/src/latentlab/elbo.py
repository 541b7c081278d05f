"""Evidence lower bound machinery, exercised on tractable models.

For a latent-variable model with joint density p(x, z) and a variational
Gaussian q, the bound is

    elbo(q, x) = log p(x) - KL(q || p(z | x)) = E_q[log p(x, z) - log q(z)].

Factor analysis and PPCA expose everything needed to evaluate both sides
exactly, which is what makes them the test bed: the first form is computed
in closed form here (`elbo_exact`), the second by Monte Carlo
(`elbo_joint_mc`), and the two must agree.  The E-step of variational EM is
the assignment q <- p(z | x), after which the bound is tight; `em_round`
packages that contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import gaussian
from .factor_analysis import FactorModel, e_step
from .gaussian import GaussianFull
from .ppca import PpcaModel
from .rng import Rng


class ElboError(ValueError):
    """Invalid variational distribution or model operand."""


@runtime_checkable
class TractableLatentModel(Protocol):
    """Capability bundle: exact joint, evidence, posterior, prior sampling."""

    latent_dim: int
    data_dim: int

    def log_joint(self, x, z) -> float: ...

    def log_evidence(self, x) -> float: ...

    def posterior(self, x) -> GaussianFull: ...

    def sample_prior(self, rand: Rng) -> np.ndarray: ...


@dataclass(frozen=True)
class LinearGaussianLatent:
    """TractableLatentModel view of a factor-analysis/PPCA parameterization."""

    model: FactorModel

    @property
    def latent_dim(self) -> int:
        return self.model.latent_dim

    @property
    def data_dim(self) -> int:
        return self.model.data_dim

    def log_joint(self, x, z) -> float:
        """log p(x | z) + log p(z) with standard-normal prior."""
        return float(self.log_joint_batch(x, np.asarray(z)[None, :])[0])

    def log_joint_batch(self, x, zs) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        zs = np.asarray(zs, dtype=np.float64)
        m = self.model
        resid = x - (zs @ m.loading.T + m.offset)
        log_lik = -0.5 * (
            np.sum(resid**2 / m.noise_diag, axis=1)
            + float(np.sum(np.log(m.noise_diag)))
            + m.data_dim * gaussian.LOG_2PI
        )
        log_prior = -0.5 * (
            np.sum(zs**2, axis=1) + m.latent_dim * gaussian.LOG_2PI
        )
        return log_lik + log_prior

    def log_evidence(self, x) -> float:
        from .factor_analysis import marginal_x

        return gaussian.log_density(marginal_x(self.model), x)

    def posterior(self, x) -> GaussianFull:
        q = e_step(self.model, x)
        return GaussianFull(q.mean, q.cov)

    def sample_prior(self, rand: Rng) -> np.ndarray:
        return rand.normal((self.latent_dim,))


def as_latent_model(model) -> LinearGaussianLatent:
    """Adapt a FactorModel or PpcaModel to the tractable-model interface."""
    if isinstance(model, LinearGaussianLatent):
        return model
    if isinstance(model, FactorModel):
        return LinearGaussianLatent(model)
    if isinstance(model, PpcaModel):
        return LinearGaussianLatent(
            FactorModel(model.loading, model.offset, model.noise_diag())
        )
    raise ElboError(f"no tractable-model adapter for {type(model).__name__}")


def elbo_exact(m, q: GaussianFull, x) -> float:
    """log evidence minus KL(q || posterior); equals the MC form exactly."""
    m = as_latent_model(m)
    if q.dim != m.latent_dim:
        raise ElboError(f"q has dimension {q.dim}, latent dim is {m.latent_dim}")
    return m.log_evidence(x) - gaussian.kl_multivariate(q, m.posterior(x))


def elbo_joint_mc(m, q: GaussianFull, x, n: int, rand: Rng):
    """Monte-Carlo bound E_q[log p(x, z) - log q(z)] with standard error."""
    m = as_latent_model(m)
    if q.dim != m.latent_dim:
        raise ElboError(f"q has dimension {q.dim}, latent dim is {m.latent_dim}")
    n = int(n)
    if n < 100:
        raise ElboError("elbo_joint_mc needs n >= 100")
    zs = gaussian.sample(q, n, rand)
    vals = m.log_joint_batch(x, zs) - gaussian.log_density_batch(q, zs)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n))


def em_round(m, x) -> tuple[GaussianFull, float]:
    """One variational E-step: q <- posterior(x).

    Returns the new q and the bound gap log p(x) - elbo(q, x), which is zero
    up to roundoff because the assignment makes the bound tight.  The matching
    M-step lives with the concrete models (factor_analysis.m_step and the VAE
    decoder updates); this operation pins down the E-step contract.
    """
    m = as_latent_model(m)
    q_new = m.posterior(x)
    gap = m.log_evidence(x) - elbo_exact(m, q_new, x)
    return q_new, gap
