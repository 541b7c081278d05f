"""Multivariate Gaussian calculus.

Densities, sampling, block conditioning/marginalization, and KL divergences
(closed-form and Monte-Carlo).  Every quadratic form and log-determinant goes
through a Cholesky factorization; an explicit inverse is never formed.
Failures to factor raise :class:`NotPositiveDefiniteError` naming the pivot
rather than silently jittering the diagonal -- callers that want damping pass
``ridge`` explicitly.

All functions are pure over immutable inputs and safe to call concurrently;
random state is carried by the caller-owned :class:`~latentlab.rng.Rng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .rng import Rng

LOG_2PI = math.log(2.0 * math.pi)

#: asymmetry above this (max-abs) is treated as caller error, not noise
SYMMETRY_TOL = 1e-9
#: variances below this are rejected; KL formulas divide by them
VARIANCE_FLOOR = 1e-12


class GaussianError(ValueError):
    """Invalid Gaussian parameterization or operand."""


class NotPositiveDefiniteError(GaussianError):
    """Cholesky factorization failed; ``pivot`` is the failing index."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise GaussianError(f"{name} must be a 1-D vector, got shape {v.shape}")
    return v


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise GaussianError(f"{name} must be a 2-D matrix, got shape {m.shape}")
    return m


def symmetrize(a: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Return (A + A^T)/2; reject matrices that are not symmetric within tol."""
    a = _as_matrix(a, "matrix")
    if a.shape[0] != a.shape[1]:
        raise GaussianError(f"expected a square matrix, got shape {a.shape}")
    skew = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if skew > tol:
        raise GaussianError(f"matrix is asymmetric by {skew:.3e} (> {tol:.0e})")
    return 0.5 * (a + a.T)


def _cholesky_pivot(a: np.ndarray) -> int:
    """Scalar Cholesky scan; returns the first failing pivot index."""
    k = a.shape[0]
    l = np.zeros_like(a)
    for j in range(k):
        s = a[j, j] - np.dot(l[j, :j], l[j, :j])
        if s <= 0.0 or not np.isfinite(s):
            return j
        l[j, j] = math.sqrt(s)
        if j + 1 < k:
            l[j + 1 :, j] = (a[j + 1 :, j] - l[j + 1 :, :j] @ l[j, :j]) / l[j, j]
    return -1


def spd_cholesky(a: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    ``ridge`` (default 0) is added to the diagonal before factorization for
    callers that explicitly opt in to damping.
    """
    a = symmetrize(a)
    if ridge:
        a = a + ridge * np.eye(a.shape[0])
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pivot = _cholesky_pivot(a)
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite: Cholesky failed at pivot {pivot}",
            pivot=pivot,
        ) from None


@dataclass(frozen=True)
class GaussianFull:
    """Gaussian with full covariance: mean (k,) and SPD cov (k, k)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        cov = _as_matrix(self.cov, "cov")
        if cov.shape != (mean.size, mean.size):
            raise GaussianError(
                f"cov shape {cov.shape} does not match mean length {mean.size}"
            )
        if cov.size and float(np.max(np.abs(cov - cov.T))) > 1e-12:
            raise GaussianError("cov must be symmetric within 1e-12")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        # PD is part of the type contract: factor once, reuse everywhere.
        object.__setattr__(self, "_chol", spd_cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of the covariance."""
        return self._chol


@dataclass(frozen=True)
class GaussianDiag:
    """Gaussian with diagonal covariance: mean (k,) and positive var (k,)."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        var = _as_vector(self.var, "var")
        if var.size != mean.size:
            raise GaussianError("mean and var must have equal length")
        if not np.all(np.isfinite(var)) or np.any(var < VARIANCE_FLOOR):
            raise GaussianError(
                f"variances must be finite and >= {VARIANCE_FLOOR:.0e}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class JointGaussianBlocks:
    """Joint Gaussian over (x, z) in block form.

    ``mu``/``s11`` describe the d-dimensional x block, ``mu0``/``s22`` the
    p-dimensional z block, and ``s12`` the (d, p) cross-covariance.  The
    assembled (d+p) covariance must be symmetric positive definite.
    """

    mu: np.ndarray
    mu0: np.ndarray
    s11: np.ndarray
    s12: np.ndarray
    s22: np.ndarray

    def __post_init__(self):
        mu = _as_vector(self.mu, "mu")
        mu0 = _as_vector(self.mu0, "mu0")
        d, p = mu.size, mu0.size
        if d < 1 or p < 1:
            raise GaussianError("both blocks must have dimension >= 1")
        s11 = symmetrize(_as_matrix(self.s11, "s11"))
        s22 = symmetrize(_as_matrix(self.s22, "s22"))
        s12 = _as_matrix(self.s12, "s12")
        if s11.shape != (d, d) or s22.shape != (p, p) or s12.shape != (d, p):
            raise GaussianError("block shapes do not match mu/mu0 dimensions")
        spd_cholesky(s11)
        spd_cholesky(s22)
        spd_cholesky(self_assembled := _assemble(s11, s12, s22))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "s11", s11)
        object.__setattr__(self, "s12", s12)
        object.__setattr__(self, "s22", s22)
        object.__setattr__(self, "_full_cov", self_assembled)

    @property
    def dim_x(self) -> int:
        return self.mu.size

    @property
    def dim_z(self) -> int:
        return self.mu0.size

    def full(self) -> GaussianFull:
        """The assembled (d+p)-dimensional Gaussian."""
        return GaussianFull(
            np.concatenate([self.mu, self.mu0]), self._full_cov
        )


def _assemble(s11, s12, s22):
    top = np.hstack([s11, s12])
    bottom = np.hstack([s12.T, s22])
    return np.vstack([top, bottom])


def log_density(g: GaussianFull, x, ridge: float = 0.0) -> float:
    """Log density of x under g, via Cholesky (never an explicit inverse)."""
    x = _as_vector(x, "x")
    if x.size != g.dim:
        raise GaussianError(f"x has length {x.size}, expected {g.dim}")
    chol = g.chol if ridge == 0.0 else spd_cholesky(g.cov, ridge=ridge)
    y = solve_triangular(chol, x - g.mean, lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (g.dim * LOG_2PI + log_det + float(y @ y))


def log_density_batch(g: GaussianFull, points: np.ndarray) -> np.ndarray:
    """Row-wise log densities for an (n, k) matrix of points."""
    points = _as_matrix(points, "points")
    if points.shape[1] != g.dim:
        raise GaussianError(
            f"points have {points.shape[1]} columns, expected {g.dim}"
        )
    chol = g.chol
    y = solve_triangular(chol, (points - g.mean).T, lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    quad = np.sum(y * y, axis=0)
    return -0.5 * (g.dim * LOG_2PI + log_det + quad)


def log_density_diag(g: GaussianDiag, x) -> float:
    """Log density under a diagonal Gaussian."""
    x = _as_vector(x, "x")
    if x.size != g.dim:
        raise GaussianError(f"x has length {x.size}, expected {g.dim}")
    resid = (x - g.mean) ** 2 / g.var
    return -0.5 * float(np.sum(np.log(g.var)) + np.sum(resid) + g.dim * LOG_2PI)


def sample(g, n: int, rand: Rng) -> np.ndarray:
    """Draw n i.i.d. rows from g (GaussianFull or GaussianDiag).

    Full covariance uses the Cholesky factor; diagonal scales elementwise.
    Deterministic for a given Rng state.
    """
    n = int(n)
    if n < 1:
        raise GaussianError("sample size must be >= 1")
    eps = rand.normal((n, g.dim))
    if isinstance(g, GaussianDiag):
        return g.mean + np.sqrt(g.var) * eps
    if isinstance(g, GaussianFull):
        return g.mean + eps @ g.chol.T
    raise GaussianError(f"cannot sample from {type(g).__name__}")


def conditional(joint: JointGaussianBlocks, x) -> GaussianFull:
    """Distribution of the z block given an observed x block.

    mean = mu0 + S21 S11^{-1} (x - mu); cov = S22 - S21 S11^{-1} S12.
    The covariance does not depend on x.
    """
    x = _as_vector(x, "x")
    if x.size != joint.dim_x:
        raise GaussianError(f"x has length {x.size}, expected {joint.dim_x}")
    chol = spd_cholesky(joint.s11)
    # S11^{-1} applied via two triangular solves
    w = solve_triangular(chol, np.column_stack([x - joint.mu, joint.s12]), lower=True)
    w = solve_triangular(chol.T, w, lower=False)
    mean = joint.mu0 + joint.s12.T @ w[:, 0]
    cov = joint.s22 - joint.s12.T @ w[:, 1:]
    return GaussianFull(mean, symmetrize(cov))


def marginal(joint: JointGaussianBlocks) -> tuple[GaussianFull, GaussianFull]:
    """Marginals of the two blocks: (N(mu, S11), N(mu0, S22))."""
    return GaussianFull(joint.mu, joint.s11), GaussianFull(joint.mu0, joint.s22)


def kl_univariate(p1: GaussianDiag, p2: GaussianDiag) -> float:
    """KL(p1 || p2) for 1-D Gaussians.

    log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2, always >= 0.
    """
    if p1.dim != 1 or p2.dim != 1:
        raise GaussianError("kl_univariate expects 1-D distributions")
    v1, v2 = float(p1.var[0]), float(p2.var[0])
    dm = float(p1.mean[0] - p2.mean[0])
    return 0.5 * math.log(v2 / v1) + (v1 + dm * dm) / (2.0 * v2) - 0.5


def kl_multivariate(p1: GaussianFull, p2: GaussianFull) -> float:
    """KL(p1 || p2) for equal-dimension full-covariance Gaussians.

    0.5 (log|S2|/|S1| - p + tr(S2^{-1} S1) + (m2-m1)^T S2^{-1} (m2-m1)).
    """
    if p1.dim != p2.dim:
        raise GaussianError(
            f"dimension mismatch: {p1.dim} vs {p2.dim}"
        )
    l1, l2 = p1.chol, p2.chol
    log_det1 = 2.0 * float(np.sum(np.log(np.diag(l1))))
    log_det2 = 2.0 * float(np.sum(np.log(np.diag(l2))))
    a = solve_triangular(l2, l1, lower=True)
    trace = float(np.sum(a * a))
    y = solve_triangular(l2, p2.mean - p1.mean, lower=True)
    quad = float(y @ y)
    return 0.5 * (log_det2 - log_det1 - p1.dim + trace + quad)


def kl_monte_carlo(
    p1: GaussianFull, p2: GaussianFull, n: int, rand: Rng
) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(p1 || p2) with its standard error.

    Averages log p1(z) - log p2(z) over n draws z ~ p1; this is the
    independent oracle for the closed forms above.
    """
    n = int(n)
    if n < 100:
        raise GaussianError("kl_monte_carlo needs n >= 100")
    z = sample(p1, n, rand)
    deltas = log_density_batch(p1, z) - log_density_batch(p2, z)
    estimate = float(np.mean(deltas))
    stderr = float(np.std(deltas, ddof=1) / math.sqrt(n))
    return estimate, stderr
