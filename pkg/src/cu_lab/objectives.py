"""Training losses for Laplace collaborative-uncertainty regression.

Residuals are grouped into slices: a target ``Y`` of shape ``(S, m)`` has
``S = 2T+`` slices, each an ``m``-vector across agents, all sharing one
``m x m`` inverse scale matrix ``A``. With a per-agent auxiliary ``phi`` the
scaled residual is ``r_si / sqrt(phi_i)``, and the negative log-likelihood
of one instance is

    1/2 [ q~ + S sum_i log phi_i - S log det A ],   q~ = sum_s r~_s^T A r~_s.

The Hadamard bound replaces ``log det A`` with ``sum_i log A_ii``. When all
agents share a single ``phi`` and ``S = 1`` both reduce to the single-draw
form ``1/2 [q/phi + m log phi - log det A]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import golden

from . import tensor as tn
from .errors import ConfigError, DefinitenessError, DimensionError, DomainError
from .tensor import Tensor

WTA_MODES = ("closest-to-gt", "phi-selected")
DE_FLOOR = 1e-12


@dataclass
class LossConfig:
    alpha: float = 0.0
    wta_mode: str = "closest-to-gt"
    use_full_nll: bool = False
    shared_phi: bool = False
    autl_mean_grad: bool = False

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("alpha must be non-negative")
        if self.wta_mode not in WTA_MODES:
            raise ConfigError(f"wta_mode must be one of {WTA_MODES}, got {self.wta_mode!r}")


@dataclass
class LossBreakdown:
    """Batch-mean loss terms. ``total`` is the differentiable tensor; the
    floats are detached copies for logging."""

    total: Tensor
    lap_cu: float
    autl: float
    q: float
    de: np.ndarray  # (B, K, m)
    winners: np.ndarray  # (B,)

    @property
    def total_value(self) -> float:
        return self.total.item()


# ---------------------------------------------------------------------------
# single-mode terms, batched over a leading axis N
# ---------------------------------------------------------------------------

def _check(resid: Tensor, sigma_inv: Tensor) -> None:
    if resid.ndim != 3 or sigma_inv.ndim != 3:
        raise DimensionError(f"expected (N, S, m) residuals and (N, m, m) matrices, "
                             f"got {resid.shape} and {sigma_inv.shape}")
    n, _, m = resid.shape
    if sigma_inv.shape != (n, m, m):
        raise DimensionError(f"sigma_inv shape {sigma_inv.shape} does not match residuals {resid.shape}")


def quad_form(resid, sigma_inv) -> Tensor:
    """``sum_s r_s^T A r_s`` per batch entry, shape ``(N,)``."""
    resid, sigma_inv = tn.as_tensor(resid), tn.as_tensor(sigma_inv)
    _check(resid, sigma_inv)
    n, s, m = resid.shape
    prod = tn.matmul(resid, sigma_inv) * resid
    return prod.reshape(n, s * m).sum(axis=1)


def _scaled(resid: Tensor, phi: Tensor) -> Tensor:
    n, s, m = resid.shape
    if phi.shape != (n, m):
        raise DimensionError(f"phi shape {phi.shape}, expected {(n, m)}")
    if np.any(phi.data <= 0):
        raise DomainError("phi must be positive")
    root = tn.broadcast_to(tn.sqrt(phi).reshape(n, 1, m), (n, s, m))
    return resid / root


def _nll(resid, phi, sigma_inv, log_det) -> Tensor:
    resid, phi, sigma_inv = tn.as_tensor(resid), tn.as_tensor(phi), tn.as_tensor(sigma_inv)
    _check(resid, sigma_inv)
    s = resid.shape[1]
    q = quad_form(_scaled(resid, phi), sigma_inv)
    return 0.5 * (q + s * tn.log(phi).sum(axis=1) - s * log_det(sigma_inv))


def _hadamard_log_det(sigma_inv: Tensor) -> Tensor:
    d = tn.diagonal(sigma_inv)
    if np.any(d.data <= 0):
        raise DomainError("diagonal of sigma_inv must be positive")
    return tn.log(d).sum(axis=1)


def lap_cu_loss(resid, phi, sigma_inv) -> Tensor:
    """Hadamard lower bound of the NLL, per batch entry ``(N,)``.

    ``resid`` ``(N, S, m)``, ``phi`` ``(N, m)``, ``sigma_inv`` ``(N, m, m)``.
    """
    return _nll(resid, phi, sigma_inv, _hadamard_log_det)


def full_nll(resid, phi, sigma_inv) -> Tensor:
    """NLL with the exact ``log det`` via Cholesky, per batch entry ``(N,)``."""
    return _nll(resid, phi, sigma_inv, tn.logdet)


# ---------------------------------------------------------------------------
# multi-mode terms
# ---------------------------------------------------------------------------

def displacement_errors(means: np.ndarray, future: np.ndarray) -> np.ndarray:
    """``DE[b, k, i]``: l2 norm of agent ``i``'s full-horizon residual in mode ``k``."""
    r = np.asarray(means) - np.asarray(future)[:, None]
    return np.sqrt(np.sum(r * r, axis=2))


def autl(means, future: np.ndarray, phi, mean_grad: bool = False) -> tuple[Tensor, np.ndarray]:
    """``sum_k sum_i |phi_ki - DE_ki|`` per instance ``(B,)``, plus ``DE``.

    By default DE is a constant, so this loss only trains ``phi``. With
    ``mean_grad`` the gradient also reaches the means through a floored norm.
    """
    means, phi = tn.as_tensor(means), tn.as_tensor(phi)
    B, K, S, m = means.shape
    if phi.shape != (B, K, m) or np.shape(future) != (B, S, m):
        raise DimensionError(f"autl: means {means.shape}, phi {phi.shape}, future {np.shape(future)}")
    de_np = displacement_errors(means.data, future)
    if mean_grad:
        r = means - Tensor(np.broadcast_to(np.asarray(future)[:, None], means.shape))
        sq = tn.transpose(r * r, (0, 1, 3, 2)).reshape(B * K * m, S).sum(axis=1)
        de = tn.sqrt(sq + DE_FLOOR).reshape(B, K, m)
    else:
        de = Tensor(de_np)
    gap = tn.absolute(phi - de)
    return gap.reshape(B, K * m).sum(axis=1), de_np


def winners(mode: str, de: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Winning mode per instance: lowest summed DE or lowest summed phi."""
    if mode == "closest-to-gt":
        return np.argmin(de.sum(axis=2), axis=1)
    if mode == "phi-selected":
        return np.argmin(np.asarray(phi).sum(axis=2), axis=1)
    raise ConfigError(f"unknown wta mode {mode!r}")


def total_loss(config: LossConfig, out, future: np.ndarray) -> LossBreakdown:
    """Batch-mean ``lap_cu(winner) + alpha * autl(all modes)``.

    ``out`` is a :class:`~cu_lab.nets.PredictiveOutput`; ``future`` is
    ``(B, 2T+, m)``.
    """
    future = np.asarray(future, dtype=np.float64)
    means, phi, sigma_inv = out.means, out.phi, out.sigma_inv
    B, K, S, m = means.shape
    autl_b, de = autl(means, future, phi, config.autl_mean_grad)
    win = winners(config.wta_mode, de, phi.data)
    rows = np.arange(B)
    mu_w = tn.index(means, (rows, win))
    phi_w = tn.index(phi, (rows, win))
    a_w = tn.index(sigma_inv, (rows, win))
    if config.shared_phi:
        phi_w = tn.broadcast_to(phi_w.mean(axis=1).reshape(B, 1), (B, m))
    resid = mu_w - Tensor(future)
    nll = full_nll if config.use_full_nll else lap_cu_loss
    lap = nll(resid, phi_w, a_w).mean()
    au = autl_b.mean()
    total = lap + config.alpha * au
    q = quad_form(resid.data, a_w.data).mean().item()
    return LossBreakdown(total, lap.item(), au.item(), q, de, win)


# ---------------------------------------------------------------------------
# numpy utilities
# ---------------------------------------------------------------------------

def recover_covariance(phi, sigma_inv: np.ndarray) -> np.ndarray:
    """Covariance implied by ``(phi, sigma_inv)``: ``D^1/2 inv(A) D^1/2`` with
    ``D = diag(phi)``, which is ``phi * inv(A)`` for a scalar ``phi``.

    Works on a single ``(m, m)`` matrix or a stack ``(..., m, m)`` with
    ``phi`` of shape ``(...,)`` or ``(..., m)``.
    """
    a = np.asarray(sigma_inv, dtype=np.float64)
    m = a.shape[-1]
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape == a.shape[:-2]:
        phi = np.repeat(phi[..., None], m, axis=-1)
    if phi.shape != a.shape[:-1]:
        raise DimensionError(f"phi shape {phi.shape} does not match sigma_inv {a.shape}")
    flat = a.reshape(-1, m, m)
    inv = np.empty_like(flat)
    eye = np.eye(m)
    for i, mat in enumerate(flat):
        try:
            inv[i] = cho_solve(cho_factor(mat, lower=True), eye)
        except np.linalg.LinAlgError:
            raise DefinitenessError("sigma_inv is not positive definite") from None
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
    root = np.sqrt(phi).reshape(-1, m)
    cov = root[:, :, None] * inv * root[:, None, :]
    return cov.reshape(a.shape)


@dataclass
class PhiStar:
    analytic: float
    grid: float
    refined: float
    tail_low: float
    tail_high: float


def phi_star_sanity(g: float, m: int, grid_points: int = 200001) -> PhiStar:
    """Locate the maximum of ``f(phi) = phi^(-m/2) exp(-g/phi)`` three ways.

    Returns the analytic point ``2g/m``, a log-spaced grid argmax, a
    golden-section refinement, and ``f`` at ``1e-3 * 2g/m`` and ``1e3 * 2g/m``
    relative to the peak (both should be tiny).
    """
    if not g > 0 or m < 1:
        raise DomainError("need g > 0 and m >= 1")
    analytic = 2.0 * g / m

    def neg_log_f(phi):
        return 0.5 * m * np.log(phi) + g / phi

    grid = np.geomspace(analytic * 1e-3, analytic * 1e3, grid_points)
    i = int(np.argmin(neg_log_f(grid)))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]
    refined = golden(neg_log_f, brack=(lo, grid[i], hi), tol=1e-12)
    peak = -neg_log_f(analytic)
    return PhiStar(
        analytic, float(grid[i]), float(refined),
        float(np.exp(-neg_log_f(analytic * 1e-3) - peak)),
        float(np.exp(-neg_log_f(analytic * 1e3) - peak)),
    )
