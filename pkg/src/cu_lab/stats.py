"""Sampling and densities for the Gaussian, exponential and multivariate
Laplace distributions, and the modified Bessel function of the second kind.

The multivariate Laplace law used here is the Gaussian scale mixture

    x = mean + sqrt(W) * g,   g ~ N(0, gamma),   W ~ Exp(mean=lam),

whose covariance is ``lam * gamma`` and whose density is

    p(x) = 2 / ((2 pi)^(m/2) lam |gamma|^(1/2))
           * K_(m/2-1)(sqrt(2 q / lam)) / (sqrt(lam q / 2))^(m/2-1),

with ``q = (x - mean)^T gamma^-1 (x - mean)``. Vectors are columns of length
``m``; batches of vectors are rows of an ``(n, m)`` array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DefinitenessError, DomainError, NumericError

QUAD_FORM_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream for ``seed``; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` statistically independent PCG64 streams derived from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------

def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising :class:`DefinitenessError` on failure."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DefinitenessError(f"expected a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) >= 1e-10:
        raise DefinitenessError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise DefinitenessError("matrix is not positive definite") from None


@dataclass(frozen=True)
class MvnParams:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DomainError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        return self._chol


@dataclass(frozen=True)
class MvLaplaceParams:
    mean: np.ndarray
    gamma: np.ndarray
    lam: float

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=np.float64))
        if gamma.shape != (mean.size, mean.size):
            raise DomainError(f"gamma shape {gamma.shape} does not match mean length {mean.size}")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "_chol", cholesky(gamma))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    @property
    def covariance(self) -> np.ndarray:
        return self.lam * self.gamma


# ---------------------------------------------------------------------------
# Bessel K
# ---------------------------------------------------------------------------

def _log_integrand(t: np.ndarray, nu: float, z: np.ndarray) -> np.ndarray:
    # log[exp(-z (cosh t - 1)) cosh(nu t)], stable for large nu * t
    return -z * (np.cosh(t) - 1.0) + nu * t + np.log1p(np.exp(-2.0 * nu * t)) - math.log(2.0)


def _peak(nu: float, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t_peak = np.arcsinh(nu / z)
    return t_peak, _log_integrand(t_peak, nu, z)


def _cutoff(nu: float, z: np.ndarray, t_peak: np.ndarray, peak: np.ndarray,
            drop: float = 50.0) -> np.ndarray:
    """Upper limit beyond which the integrand is below exp(-drop) of its peak."""
    lo = t_peak.copy()
    hi = t_peak + 1.0
    while True:
        short = _log_integrand(hi, nu, z) > peak - drop
        if not short.any():
            break
        hi = np.where(short, t_peak + 2.0 * (hi - t_peak), hi)
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        above = _log_integrand(mid, nu, z) > peak - drop
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return hi


def _log_kv_quad(nu: float, z: np.ndarray, rtol: float, max_panels: int) -> np.ndarray:
    t_peak, peak = _peak(nu, z)
    upper = _cutoff(nu, z, t_peak, peak)
    zc, pc, uc = z[:, None], peak[:, None], upper[:, None]

    def scaled(frac):
        return np.exp(_log_integrand(uc * frac[None, :], nu, zc) - pc)

    # trapezoid sums relative to the peak value, reusing nodes on each halving
    n = 16
    ends = scaled(np.array([0.0, 1.0]))
    total = 0.5 * (ends[:, 0] + ends[:, 1]) + scaled(np.arange(1, n) / n).sum(axis=1)
    prev = np.log(total / n)
    while 2 * n <= max_panels:
        total += scaled((np.arange(n) + 0.5) / n).sum(axis=1)
        n *= 2
        cur = np.log(total / n)
        change = np.max(np.abs(cur - prev))
        if change < rtol:
            return cur + np.log(upper) + peak - z
        prev = cur
    raise NumericError(
        f"Bessel K quadrature did not converge for nu={nu}: last change "
        f"{change:.3e} at {n} panels, z range [{z.min():.3e}, {z.max():.3e}]"
    )


def log_bessel_k(nu: float, z, rtol: float = 1e-13, max_panels: int = 1 << 14, chunk: int = 1 << 14):
    """log K_nu(z) for real order ``nu`` and positive ``z`` (scalar or array).

    Uses ``K_nu(z) = int_0^inf exp(-z cosh t) cosh(nu t) dt`` evaluated by a
    trapezoid rule whose panel count doubles until successive log-values agree
    to ``rtol``. The integrand is even and analytic in ``t``, so the rule
    converges geometrically. Order 1/2 takes the closed form.
    """
    nu = abs(float(nu))
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(~(z_arr > 0)):
        raise DomainError("Bessel K needs z > 0")
    flat = z_arr.reshape(-1)
    if nu == 0.5:
        out = 0.5 * np.log(math.pi / (2.0 * flat)) - flat
    else:
        out = np.empty_like(flat)
        for start in range(0, flat.size, chunk):
            sl = slice(start, start + chunk)
            out[sl] = _log_kv_quad(nu, flat[sl], rtol, max_panels)
    out = out.reshape(z_arr.shape)
    return float(out) if out.ndim == 0 else out


def bessel_k(nu: float, z, **kw):
    """Modified Bessel function of the second kind, K_nu(z)."""
    return np.exp(log_bessel_k(nu, z, **kw))


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def mvn_sample(params: MvnParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws as an ``(n, m)`` array: ``mean + L z`` with ``z`` standard normal."""
    z = rng.standard_normal((int(n), params.dim))
    return params.mean + z @ params.chol.T


def exp_from_uniform(u, lam: float):
    """Inverse CDF of the exponential with mean ``lam`` at ``u`` in (0, 1]."""
    if not lam > 0:
        raise DomainError("lambda must be positive")
    return -lam * np.log(u)


def exp_sample(lam: float, rng: np.random.Generator, n: int) -> np.ndarray:
    if not lam > 0:
        raise DomainError("lambda must be positive")
    u = 1.0 - rng.random(int(n))  # (0, 1]
    out = exp_from_uniform(u, lam)
    # u == 1 maps to exactly 0; nudge to the smallest positive double
    return np.where(out > 0, out, np.nextafter(0.0, 1.0))


def mvlaplace_sample(params: MvLaplaceParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws as ``(n, m)``; one exponential mixing variable per vector."""
    g = mvn_sample(MvnParams(np.zeros(params.dim), params.gamma), rng, n)
    w = exp_sample(params.lam, rng, n)
    return params.mean + g * np.sqrt(w)[:, None]


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _mahalanobis(chol: np.ndarray, d: np.ndarray) -> np.ndarray:
    y = solve_triangular(chol, d.T, lower=True)
    return np.sum(y * y, axis=0)


def _as_rows(x, m: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    x = x.reshape(1, -1) if single else x
    if x.shape[1] != m:
        raise DomainError(f"expected vectors of length {m}, got {x.shape[1]}")
    return x, single


def mvn_logpdf(params: MvnParams, x):
    x, single = _as_rows(x, params.dim)
    q = _mahalanobis(params.chol, x - params.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(params.chol)))
    out = -0.5 * (params.dim * LOG_2PI + logdet + q)
    return float(out[0]) if single else out


def mvlaplace_logpdf(params: MvLaplaceParams, x):
    """Log density. At ``x == mean`` (where the density is infinite for
    ``m >= 2``) the quadratic form is clamped to ``QUAD_FORM_FLOOR``."""
    x, single = _as_rows(x, params.dim)
    m, lam = params.dim, params.lam
    q = np.maximum(_mahalanobis(params.chol, x - params.mean), QUAD_FORM_FLOOR)
    nu = m / 2.0 - 1.0
    logdet_gamma = 2.0 * np.sum(np.log(np.diag(params.chol)))
    out = (
        math.log(2.0) - 0.5 * m * LOG_2PI - math.log(lam) - 0.5 * logdet_gamma
        + log_bessel_k(nu, np.sqrt(2.0 * q / lam))
        - 0.5 * nu * np.log(0.5 * lam * q)
    )
    out = np.atleast_1d(out)
    return float(out[0]) if single else out
