"""Evaluation quantities: toy-problem distribution metrics, trajectory
forecasting metrics and the stochasticity score.

Trajectories use the ``(2T, m)`` layout of :mod:`cu_lab.datagen`; a point is
the 2-D position of one agent at one timestamp.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import stats
from .errors import ContractError, DimensionError
from .stats import MvLaplaceParams, MvnParams

KL_NEGATIVE_FLAG = -0.01


# ---------------------------------------------------------------------------
# divergences
# ---------------------------------------------------------------------------

def kl_gaussian(p_g: MvnParams, p_e: MvnParams) -> float:
    """KL(p_g || p_e) in closed form."""
    if p_g.dim != p_e.dim:
        raise DimensionError("distributions have different dimensions")
    k = p_g.dim
    if p_g.mean.tobytes() == p_e.mean.tobytes() and p_g.covariance.tobytes() == p_e.covariance.tobytes():
        return 0.0
    le, lg = p_e.chol, p_g.chol
    logdet = 2.0 * (np.sum(np.log(np.diag(le))) - np.sum(np.log(np.diag(lg))))
    # trace(Se^-1 Sg) = ||Le^-1 Lg||_F^2
    m = np.linalg.solve(le, lg)
    diff = np.linalg.solve(le, p_g.mean - p_e.mean)
    return 0.5 * (logdet - k + float(diff @ diff) + float(np.sum(m * m)))


def kl_laplace_mc(p_g: MvLaplaceParams, p_e: MvLaplaceParams, n: int,
                  rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo KL(p_g || p_e) from ``n`` draws of ``p_g``; returns
    ``(estimate, standard error)``."""
    if n < 1000:
        raise ContractError("kl_laplace_mc needs at least 1000 samples")
    x = stats.mvlaplace_sample(p_g, rng, n)
    d = stats.mvlaplace_logpdf(p_g, x) - stats.mvlaplace_logpdf(p_e, x)
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n))


def kl_laplace_dataset(gt_mean: np.ndarray, gt_sigma: np.ndarray, gt_lambda: np.ndarray,
                       est_mean: np.ndarray, est_cov: np.ndarray, n: int,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance slice-averaged Monte-Carlo KL between the true Laplace law
    and the estimated one (covariance ``est_cov``, unit lambda).

    Each draw picks one of the ``S`` slices uniformly, samples ``p_g`` at it
    and scores ``log p_g - log p_e``. Instances with the same ground-truth
    ``(sigma, lambda)`` share their noise draws (common random numbers), so
    differences between estimators are not swamped by sampling noise.
    Returns ``(kl, stderr)`` arrays of length ``N``.
    """
    N, S, m = gt_mean.shape
    kl = np.empty(N)
    se = np.empty(N)
    keys = [gt_sigma[i].tobytes() + np.float64(gt_lambda[i]).tobytes() for i in range(N)]
    cache: dict[bytes, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for i in range(N):
        if keys[i] not in cache:
            rng = stats.make_rng(seed)
            p_g = MvLaplaceParams(np.zeros(m), gt_sigma[i], gt_lambda[i])
            noise = stats.mvlaplace_sample(p_g, rng, n)
            slices = rng.integers(0, S, size=n)
            cache[keys[i]] = (noise, slices, stats.mvlaplace_logpdf(p_g, noise))
        noise, slices, log_pg = cache[keys[i]]
        x = noise + gt_mean[i][slices] - est_mean[i][slices]
        log_pe = stats.mvlaplace_logpdf(MvLaplaceParams(np.zeros(m), est_cov[i], 1.0), x)
        d = log_pg - log_pe
        kl[i] = d.mean()
        se[i] = d.std(ddof=1) / np.sqrt(n)
    return kl, se


# ---------------------------------------------------------------------------
# toy metrics
# ---------------------------------------------------------------------------

@dataclass
class ToyReport:
    l2_mu: float
    l1_sigma: float
    l1_sigma_inv: float
    kl: float
    kl_stderr: float = float("nan")
    kl_flagged: bool = False


def _points(traj: np.ndarray) -> np.ndarray:
    """``(..., 2T, m)`` -> ``(..., T, 2, m)``."""
    s, m = traj.shape[-2:]
    return traj.reshape(traj.shape[:-2] + (s // 2, 2, m))


def pointwise_l2(est_mean: np.ndarray, gt_mean: np.ndarray) -> float:
    if est_mean.shape != gt_mean.shape:
        raise DimensionError(f"mean shapes differ: {est_mean.shape} vs {gt_mean.shape}")
    d = _points(est_mean - gt_mean)
    return float(np.sqrt(np.sum(d * d, axis=-2)).mean())


def toy_metrics(est_mean: np.ndarray, est_cov: np.ndarray, gt_mean: np.ndarray,
                gt_cov: np.ndarray) -> tuple[float, float, float]:
    """``(l2 of mu, l1 of Sigma, l1 of Sigma^-1)``: mean pointwise l2 position
    error and entry-mean absolute errors of the matrices, averaged over
    instances. ``gt_cov`` is the true covariance ``lambda * Gamma``."""
    est_cov, gt_cov = np.asarray(est_cov), np.asarray(gt_cov)
    if est_cov.shape != gt_cov.shape:
        raise DimensionError(f"covariance shapes differ: {est_cov.shape} vs {gt_cov.shape}")
    l1_sigma = float(np.mean(np.abs(est_cov - gt_cov)))
    l1_inv = float(np.mean(np.abs(np.linalg.inv(est_cov) - np.linalg.inv(gt_cov))))
    return pointwise_l2(np.asarray(est_mean), np.asarray(gt_mean)), l1_sigma, l1_inv


def toy_report(est_mean, est_cov, gt_mean, gt_sigma, gt_lambda, kl_samples: int = 10_000,
               seed: int = 0) -> ToyReport:
    gt_cov = np.asarray(gt_lambda)[:, None, None] * gt_sigma
    l2, l1s, l1i = toy_metrics(est_mean, est_cov, gt_mean, gt_cov)
    kl, se = kl_laplace_dataset(gt_mean, gt_sigma, gt_lambda, est_mean, est_cov, kl_samples, seed)
    value = float(kl.mean())
    stderr = float(np.sqrt(np.sum(se ** 2)) / len(se))
    return ToyReport(l2, l1s, l1i, value, stderr, value < KL_NEGATIVE_FLAG)


# ---------------------------------------------------------------------------
# forecasting metrics
# ---------------------------------------------------------------------------

@dataclass
class ForecastReport:
    ade: float
    fde: float
    ade1: float
    fde1: float
    adek: float
    fdek: float
    brier_fdek: float
    k_used: int


def mode_probabilities(phi: np.ndarray) -> np.ndarray:
    """``softmax_k(-mean_i phi[..., k, i])``: lower uncertainty, higher weight."""
    z = -np.asarray(phi).mean(axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def point_errors(means: np.ndarray, future: np.ndarray) -> np.ndarray:
    """``(B, K, T, m)`` Euclidean errors of ``means (B, K, 2T, m)``."""
    d = _points(means - future[:, None])
    return np.sqrt(np.sum(d * d, axis=-2))


def forecast_metrics(means: np.ndarray, selected: np.ndarray, future: np.ndarray,
                     probs: np.ndarray | None = None) -> ForecastReport:
    """Forecasting metrics averaged over instances and agents.

    ``means`` is ``(K, 2T, m)`` or ``(B, K, 2T, m)``; ``selected`` and ``future``
    drop the ``K`` axis; ``probs`` is ``(K,)`` or ``(B, K)`` and defaults to
    uniform. ADE/FDE average over all modes; ADE_1/FDE_1 score ``selected``;
    ADE_k/FDE_k take the per-agent best mode; Brier-FDE_k adds
    ``(1 - p)^2`` for the per-agent best-FDE mode.
    """
    means, selected, future = (np.asarray(a, dtype=np.float64) for a in (means, selected, future))
    if means.ndim == 3:
        means, selected, future = means[None], selected[None], future[None]
        probs = None if probs is None else np.asarray(probs)[None]
    B, K, S, m = means.shape
    if selected.shape != (B, S, m) or future.shape != (B, S, m):
        raise DimensionError(f"shapes: means {means.shape}, selected {selected.shape}, future {future.shape}")
    if probs is None:
        probs = np.full((B, K), 1.0 / K)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (B, K) or np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("mode probabilities must be non-negative and sum to 1 per instance")
    err = point_errors(means, future)  # (B, K, T, m)
    sel = point_errors(selected[:, None], future)[:, 0]  # (B, T, m)
    ade_mode = err.mean(axis=2)  # (B, K, m)
    fde_mode = err[:, :, -1]
    best = np.argmin(fde_mode, axis=1)  # (B, m)
    fdek = fde_mode.min(axis=1)
    p_best = np.take_along_axis(probs[:, :, None].repeat(m, axis=2), best[:, None], axis=1)[:, 0]
    return ForecastReport(
        ade=float(err.mean()),
        fde=float(fde_mode.mean()),
        ade1=float(sel.mean()),
        fde1=float(sel[:, -1].mean()),
        adek=float(ade_mode.min(axis=1).mean()),
        fdek=float(fdek.mean()),
        brier_fdek=float((fdek + (1.0 - p_best) ** 2).mean()),
        k_used=K,
    )


# ---------------------------------------------------------------------------
# stochasticity
# ---------------------------------------------------------------------------

def stochasticity(modes: np.ndarray) -> float:
    """Element-wise mean of the unbiased across-mode variance of ``modes
    (K, d)`` (one agent's flattened mode trajectories)."""
    modes = np.asarray(modes, dtype=np.float64)
    if modes.ndim < 2 or modes.shape[0] < 2:
        raise ContractError("stochasticity needs at least two modes")
    return float(np.var(modes, axis=0, ddof=1).mean())


def stochasticity_scores(means: np.ndarray) -> np.ndarray:
    """Per-instance score for ``means (B, K, 2T, m)``: mean over agents of the
    per-agent score."""
    means = np.asarray(means, dtype=np.float64)
    if means.shape[1] < 2:
        raise ContractError("stochasticity needs at least two modes")
    return np.var(means, axis=1, ddof=1).mean(axis=(1, 2))


@dataclass
class Curve:
    bin_stochasticity: list[float]
    bin_uncertainty: list[float]
    spearman: float
    spearman_defined: bool = True


def stochasticity_uncertainty_curve(stoch: np.ndarray, unc: np.ndarray, bins: int = 10) -> Curve:
    """Equal-count bins by stochasticity plus the Spearman rank correlation.

    A constant input makes the rank correlation undefined; it is then
    reported as 0 with ``spearman_defined=False``.
    """
    stoch, unc = np.asarray(stoch, dtype=np.float64), np.asarray(unc, dtype=np.float64)
    if stoch.shape != unc.shape or stoch.ndim != 1:
        raise DimensionError("stochasticity and uncertainty must be equal-length vectors")
    order = np.argsort(stoch, kind="stable")
    groups = [g for g in np.array_split(order, bins) if g.size]
    bs = [float(stoch[g].mean()) for g in groups]
    bu = [float(unc[g].mean()) for g in groups]
    if np.ptp(stoch) == 0 or np.ptp(unc) == 0:
        return Curve(bs, bu, 0.0, False)
    rho = spearmanr(stoch, unc).statistic
    return Curve(bs, bu, float(rho), True)


def selected_uncertainty(phi: np.ndarray) -> np.ndarray:
    """Per-instance mean over agents of the selected (lowest) ``phi``."""
    return np.asarray(phi).min(axis=1).mean(axis=-1)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """One row of results: run metadata plus named metric values."""

    run: str
    split: str
    values: dict[str, float]
    meta: dict[str, str] = field(default_factory=dict)

    def row(self) -> dict:
        out = {"run": self.run, "split": self.split}
        out.update(self.meta)
        out.update({k: _fmt(v) for k, v in self.values.items()})
        return out

    def to_json(self) -> dict:
        return asdict(self)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def reports_to_csv(reports: list[MetricReport]) -> str:
    rows = [r.row() for r in reports]
    header: list[str] = []
    for r in rows:
        header.extend(k for k in r if k not in header)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def reports_to_json(reports: list[MetricReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True, default=float)
