"""Training loop, evaluation and run records."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import datagen, metrics, nets, objectives, stats, tensor as tn
from ..errors import NumericError
from ..metrics import MetricReport
from .config import RunConfig


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def make_splits(cfg: RunConfig) -> dict[str, datagen.Dataset]:
    if cfg.data_path:
        return datagen.load_splits(cfg.data_path)
    spec = cfg.data_spec()
    return datagen.gen_toy(spec) if cfg.data_kind == "toy" else datagen.gen_scenes(spec)


def data_hash(splits: dict[str, datagen.Dataset]) -> str:
    h = hashlib.sha256()
    for name in sorted(splits):
        h.update(name.encode())
        h.update(splits[name].content_hash().encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _head(ds: datagen.Dataset, n: int) -> datagen.Dataset:
    return ds if n <= 0 or n >= len(ds) else ds.subset(range(n))


def toy_estimate(model: nets.Model, past: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance ``(mean (B, 2T, m), covariance (B, m, m))``.

    With several modes the one with the lowest agent-mean ``phi`` is used.
    """
    mu, phi, sig = model.predict(past)
    k = np.argmin(phi.mean(axis=-1), axis=1)
    rows = np.arange(len(k))
    return mu[rows, k], objectives.recover_covariance(phi[rows, k], sig[rows, k])


def evaluate_toy(model, ds, kl_samples: int, seed: int) -> dict[str, float]:
    mean, cov = toy_estimate(model, ds.past)
    r = metrics.toy_report(mean, cov, ds.gt_mean, ds.gt_sigma, ds.gt_lambda, kl_samples, seed)
    return {"l2_mu": r.l2_mu, "l1_sigma": r.l1_sigma, "l1_sigma_inv": r.l1_sigma_inv,
            "kl": r.kl, "kl_stderr": r.kl_stderr, "kl_flagged": r.kl_flagged}


def evaluate_forecast(model, ds) -> tuple[dict[str, float], metrics.Curve]:
    """Forecasting metrics, the uncertainty calibration gap and the
    stochasticity-uncertainty relation on one split."""
    means, phi, _ = model.predict(ds.past)
    k = np.argmin(phi, axis=1)  # (B, m), first index on ties as in nets.select
    rows = np.arange(len(k))[:, None]
    cols = np.arange(phi.shape[-1])[None]
    picked = np.moveaxis(means, 3, 2)[rows, k, cols].transpose(0, 2, 1)
    probs = metrics.mode_probabilities(phi)
    rep = metrics.forecast_metrics(means, picked, ds.future, probs)
    de = objectives.displacement_errors(means, ds.future)
    gap = np.abs(phi[rows, k, cols] - de[rows, k, cols]).mean()
    curve = (metrics.stochasticity_uncertainty_curve(metrics.stochasticity_scores(means),
                                                     metrics.selected_uncertainty(phi))
             if means.shape[1] >= 2 else None)
    values = {"ade": rep.ade, "fde": rep.fde, "ade1": rep.ade1, "fde1": rep.fde1,
              "adek": rep.adek, "fdek": rep.fdek, "brier_fdek": rep.brier_fdek,
              "phi_de_gap": float(gap), "k_used": rep.k_used}
    if curve is not None:
        values["spearman"] = curve.spearman
        values["spearman_defined"] = curve.spearman_defined
    return values, curve


def evaluate(model, ds, cfg: RunConfig, split: str, run_meta: dict) -> tuple[MetricReport, object]:
    ds = _head(ds, cfg.eval.test_subset)
    if cfg.data_kind == "toy":
        values, curve = evaluate_toy(model, ds, cfg.eval.kl_samples, cfg.seed), None
    else:
        values, curve = evaluate_forecast(model, ds)
    return MetricReport(cfg.name, split, values, dict(run_meta)), curve


def validation_score(model, ds, cfg: RunConfig) -> float:
    """Lower is better: KL on the toy problem, FDE_1 on scenes."""
    ds = _head(ds, cfg.eval.val_subset)
    if cfg.data_kind == "toy":
        mean, cov = toy_estimate(model, ds.past)
        kl, _ = metrics.kl_laplace_dataset(ds.gt_mean, ds.gt_sigma, ds.gt_lambda, mean, cov,
                                           cfg.eval.val_kl_samples, cfg.seed)
        return float(kl.mean())
    return evaluate_forecast(model, ds)[0]["fde1"]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

TRACE_FIELDS = ("step", "total", "lap_cu", "autl", "q", "grad_norm", "lr")


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    data_hash: str
    model_fingerprint: str = ""
    trace: list[tuple] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    selected_step: int = 0
    reports: list[MetricReport] = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    tags: dict = field(default_factory=dict)

    def meta(self) -> dict[str, str]:
        m = self.config["model"]
        return {"config_hash": self.config_hash, "data_hash": self.data_hash,
                "seed": str(self.config["seed"]), "estimator": m["estimator"],
                "interaction": m["interaction"], "alpha": repr(self.config["loss"]["alpha"]),
                "K": str(m["K"]), **self.tags}

    def to_json(self) -> dict:
        return {
            "config": self.config, "config_hash": self.config_hash, "data_hash": self.data_hash,
            "model_fingerprint": self.model_fingerprint, "selected_step": self.selected_step,
            "validation": self.validation, "wall_clock": self.wall_clock, "tags": self.tags,
            "reports": [r.to_json() for r in self.reports],
            "curves": {k: vars(c) for k, c in self.curves.items() if c is not None},
        }


def _snapshot(model: nets.Model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def _restore(model: nets.Model, snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        model.params[k].data = v.copy()


def train(cfg: RunConfig, splits=None, out_dir=None, log=None, tags=None) -> tuple[nets.Model, RunRecord]:
    """Fit one model and evaluate it on the validation and test splits.

    ``tags`` are extra string labels copied into every report row.

    Writes ``model.ckpt``, ``trace.csv`` and ``record.json`` to ``out_dir``
    when given. A non-finite loss or gradient stops the run: the last
    finite parameters go to ``last_good.ckpt`` and :class:`NumericError`
    is raised.
    """
    started = time.perf_counter()
    splits = splits if splits is not None else make_splits(cfg)
    train_ds = splits["train"]
    model = nets.Model(cfg.model)
    params = model.parameters()
    record = RunRecord(cfg.to_dict(), cfg.hash(), data_hash(splits), tags=dict(tags or {}))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    tc = cfg.train
    batch_rng = stats.split_rng(cfg.seed, 2)[1]
    adam = tn.Adam(params, tc.lr) if tc.optimizer == "adam" else None
    every = cfg.eval.every or tc.steps
    select_best = cfg.data_kind == "toy"
    best, best_score, best_step = _snapshot(model), float("inf"), 0
    last_good = best

    def check_val(step):
        nonlocal best, best_score, best_step
        score = validation_score(model, splits["val"], cfg)
        record.validation.append((step, score))
        if log:
            log(f"step {step}: validation {score:.4f}")
        if score < best_score or not select_best:
            best, best_score, best_step = _snapshot(model), score, step

    if tc.steps == 0:
        check_val(0)
    for step in range(tc.steps):
        idx = batch_rng.integers(0, len(train_ds), tc.batch_size)
        tn.zero_grad(params)
        parts = objectives.total_loss(cfg.loss, model(train_ds.past[idx]), train_ds.future[idx])
        norm = float("nan")
        if np.isfinite(parts.total_value):
            tn.backward(parts.total)
            norm = tn.grad_norm(params)
        if not np.isfinite(norm):
            if out is not None:
                _restore(model, last_good)
                nets.save_checkpoint(model, out / "last_good.ckpt", {"step": max(step - 1, 0)})
            raise NumericError(
                f"non-finite training state at step {step}: total={parts.total_value}, "
                f"lap_cu={parts.lap_cu}, autl={parts.autl}, grad_norm={norm}"
                + (f"; last finite parameters saved to {out / 'last_good.ckpt'}" if out else ""))
        last_good = _snapshot(model)  # these parameters gave a finite loss
        lr = tc.lr_at(step)
        if adam is not None:
            adam.lr = lr
            adam.step(tc.grad_clip)
        else:
            tn.sgd_step(params, lr, tc.grad_clip)
        record.trace.append((step, parts.total_value, parts.lap_cu, parts.autl, parts.q, norm, lr))
        if (step + 1) % every == 0 or step + 1 == tc.steps:
            check_val(step + 1)

    _restore(model, best)
    record.selected_step = best_step
    record.model_fingerprint = model.fingerprint()
    meta = record.meta()
    for split in ("val", "test"):
        rep, curve = evaluate(model, splits[split], cfg, split, meta)
        record.reports.append(rep)
        record.curves[split] = curve
    record.wall_clock = time.perf_counter() - started
    if out is not None:
        write_run(out, model, record)
    return model, record


def write_run(out: Path, model: nets.Model, record: RunRecord) -> None:
    nets.save_checkpoint(model, out / "model.ckpt",
                         {"selected_step": record.selected_step, "config_hash": record.config_hash,
                          "data_hash": record.data_hash})
    lines = [",".join(TRACE_FIELDS)]
    lines += [",".join([str(r[0])] + [repr(float(v)) for v in r[1:]]) for r in record.trace]
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    (out / "record.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True, default=float))
    (out / "metrics.csv").write_text(metrics.reports_to_csv(record.reports))


def smoothed_increase(trace_total: np.ndarray, window: int = 100, after: int = 500) -> float:
    """Largest relative rise of the ``window``-step moving average of the
    loss after step ``after``; the training-health check."""
    x = np.asarray(trace_total, dtype=np.float64)
    if len(x) < window + after:
        return 0.0
    ma = np.convolve(x, np.ones(window) / window, mode="valid")[after:]
    running_min = np.minimum.accumulate(ma)
    return float(np.max((ma - running_min) / np.abs(running_min)))
