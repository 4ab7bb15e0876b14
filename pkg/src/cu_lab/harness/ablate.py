"""Experiment grids over named axes.

A grid is written ``axis[xaxis...]``, e.g. ``estimator x interaction``
(``×`` is accepted too). Each cell is the base config with one value per
axis applied, trained into its own directory under the output root.

Axes:

* ``estimator``   pe-cu, cu-npe, iu-only
* ``interaction`` none, attention
* ``cu``          iu-only, pe-cu (IU vs IU+CU; the IU estimator is the
  diagonal-only one, CU adds the off-diagonal terms)
* ``alpha``       0, 0.5, 1
* ``seed``        the ``seeds`` argument (default 0, 1, 2)
* ``coupling``    the scene config's coupling and 0 (scenes only)
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..metrics import MetricReport
from ..nets import ESTIMATORS, INTERACTIONS
from .config import RunConfig
from .train import RunRecord, make_splits, train


@dataclass
class Cell:
    name: str
    axes: dict[str, str]
    config: RunConfig


def _axis_values(axis: str, base: RunConfig, seeds) -> list[tuple[str, list[tuple[str, str, object]]]]:
    """``[(label, [(section, key, value), ...]), ...]`` for one axis."""
    if axis == "estimator":
        return [(e, [("model", "estimator", e)]) for e in ESTIMATORS]
    if axis == "interaction":
        return [(i, [("model", "interaction", i)]) for i in INTERACTIONS]
    if axis == "cu":
        return [("iu", [("model", "estimator", "iu-only")]), ("iu+cu", [("model", "estimator", "pe-cu")])]
    if axis == "alpha":
        return [(repr(a), [("loss", "alpha", a)]) for a in (0.0, 0.5, 1.0)]
    if axis == "seed":
        return [(str(s), [("run", "seed", int(s))]) for s in seeds]
    if axis == "coupling":
        if base.data_kind != "scenes":
            raise ConfigError("the coupling axis needs scene data")
        c = base.data_spec().coupling
        return [(repr(v), [("data", "coupling", v)]) for v in dict.fromkeys((c, 0.0))]
    raise ConfigError(f"unknown grid axis {axis!r}; known: estimator, interaction, cu, alpha, seed, coupling")


def parse_grid(text: str) -> list[str]:
    axes = [a.strip() for a in re.split(r"[x×*,]", text) if a.strip()]
    if not axes or len(set(axes)) != len(axes):
        raise ConfigError(f"bad grid {text!r}")
    return axes


def expand(base: RunConfig, grid: str, seeds=(0, 1, 2)) -> list[Cell]:
    axes = parse_grid(grid)
    options = [_axis_values(a, base, seeds) for a in axes]
    cells = []
    for combo in itertools.product(*options):
        cfg = base
        for _, changes in combo:
            for section, key, value in changes:
                cfg = cfg.override(section, key, value)
        labels = {a: label for a, (label, _) in zip(axes, combo)}
        name = "__".join(f"{a}={label}" for a, label in labels.items())
        cfg = cfg.override("run", "name", name)
        cells.append(Cell(name, labels, cfg))
    return cells


def run_grid(base: RunConfig, grid: str, out_dir, seeds=(0, 1, 2), log=None) -> list[tuple[Cell, RunRecord]]:
    """Train every cell. Cells sharing a data spec share one generated
    dataset, so differences between cells come from the model side."""
    out = Path(out_dir)
    data_cache: dict[str, dict] = {}
    results = []
    for cell in expand(base, grid, seeds):
        key = repr((cell.config.data_kind, cell.config.data_path, sorted(cell.config.data.items()), cell.config.seed))
        if key not in data_cache:
            data_cache[key] = make_splits(cell.config)
        if log:
            log(f"cell {cell.name}")
        _, record = train(cell.config, data_cache[key], out / cell.name, log, tags=cell.axes)
        results.append((cell, record))
    return results


def delta_rates(reports: list[MetricReport], metric_names=("ade1", "fde1", "adek", "fdek")) -> list[dict]:
    """Relative improvement of IU+CU over IU per interaction setting and
    coupling: ``(IU - IU+CU) / IU`` for each error metric (positive = CU
    helps). Reads the ``cu``/``interaction``/``coupling`` axis labels from
    report meta."""
    groups: dict[tuple, dict[str, MetricReport]] = {}
    for r in reports:
        if r.split != "test" or "cu" not in r.meta:
            continue
        key = (r.meta.get("interaction", ""), r.meta.get("coupling", ""), r.meta.get("seed", ""))
        groups.setdefault(key, {})[r.meta["cu"]] = r
    rows = []
    for (inter, coupling, seed), pair in sorted(groups.items()):
        if {"iu", "iu+cu"} <= set(pair):
            row = {"interaction": inter, "coupling": coupling, "seed": seed}
            for name in metric_names:
                base, cu = pair["iu"].values[name], pair["iu+cu"].values[name]
                row[f"delta_{name}"] = (base - cu) / base if base else 0.0
            rows.append(row)
    return rows
