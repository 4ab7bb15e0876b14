"""Aggregate run directories into report files.

Outputs (all deterministic given the run records):

* ``metrics.csv``  one row per run per split
* ``metrics.json`` full breakdown
* ``long.csv``     ``run, split, metric, value`` plus hashes and tags
* ``curve.csv``    binned stochasticity vs uncertainty per run (when present)
* ``delta.csv``    IU vs IU+CU relative improvements (when present)
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..errors import ParseError
from ..metrics import MetricReport, reports_to_csv, reports_to_json
from .ablate import delta_rates


def find_records(root) -> list[Path]:
    return sorted(Path(root).rglob("record.json"))


def load_reports(root) -> tuple[list[MetricReport], dict[str, dict]]:
    reports, curves = [], {}
    for path in find_records(root):
        try:
            rec = json.loads(path.read_text())
            for r in rec["reports"]:
                reports.append(MetricReport(r["run"], r["split"], r["values"], r["meta"]))
            for split, c in rec.get("curves", {}).items():
                curves[(rec["reports"][0]["run"], split)] = c
        except (json.JSONDecodeError, KeyError, IndexError) as exc:
            raise ParseError(f"{path}: not a run record ({exc})") from None
    return reports, curves


def _csv(rows: list[dict]) -> str:
    header: list[str] = []
    for r in rows:
        header.extend(k for k in r if k not in header)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def long_rows(reports: list[MetricReport]) -> list[dict]:
    rows = []
    for r in reports:
        for name in sorted(r.values):
            v = r.values[name]
            rows.append({"run": r.run, "split": r.split, "metric": name,
                         "value": repr(float(v)), **r.meta})
    return rows


def curve_rows(curves: dict) -> list[dict]:
    rows = []
    for (run, split), c in sorted(curves.items()):
        for i, (s, u) in enumerate(zip(c["bin_stochasticity"], c["bin_uncertainty"])):
            rows.append({"run": run, "split": split, "bin": i, "stochasticity": repr(s),
                         "uncertainty": repr(u), "spearman": repr(c["spearman"])})
    return rows


def ordering_summary(reports: list[MetricReport]) -> list[dict]:
    """Per seed, the toy-problem comparison of the three estimators on test:
    whether ``KL(pe-cu) < KL(cu-npe) < KL(iu-only)`` and whether
    ``l1_sigma(pe-cu) < l1_sigma(iu-only)``."""
    by_seed: dict[str, dict[str, MetricReport]] = {}
    for r in reports:
        if r.split == "test" and "kl" in r.values:
            by_seed.setdefault(r.meta.get("seed", ""), {})[r.meta.get("estimator", "")] = r
    rows = []
    for seed, cells in sorted(by_seed.items()):
        if {"pe-cu", "cu-npe", "iu-only"} <= set(cells):
            kl = {e: cells[e].values["kl"] for e in cells}
            l1 = {e: cells[e].values["l1_sigma"] for e in cells}
            rows.append({
                "seed": seed,
                "kl_pe_cu": repr(kl["pe-cu"]), "kl_cu_npe": repr(kl["cu-npe"]), "kl_iu_only": repr(kl["iu-only"]),
                "l1_sigma_pe_cu": repr(l1["pe-cu"]), "l1_sigma_iu_only": repr(l1["iu-only"]),
                "kl_order_holds": str(kl["pe-cu"] < kl["cu-npe"] < kl["iu-only"]).lower(),
                "l1_sigma_order_holds": str(l1["pe-cu"] < l1["iu-only"]).lower(),
            })
    return rows


def write_report(root, out_dir=None) -> dict[str, Path]:
    reports, curves = load_reports(root)
    out = Path(out_dir or root)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics.csv": reports_to_csv(reports),
        "metrics.json": reports_to_json(reports),
        "long.csv": _csv(long_rows(reports)),
    }
    if curves:
        files["curve.csv"] = _csv(curve_rows(curves))
    deltas = delta_rates(reports)
    if deltas:
        files["delta.csv"] = _csv([{k: v if isinstance(v, str) else repr(v) for k, v in d.items()} for d in deltas])
    order = ordering_summary(reports)
    if order:
        files["ordering.csv"] = _csv(order)
    paths = {}
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        paths[name] = path
    return paths
