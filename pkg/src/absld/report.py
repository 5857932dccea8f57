"""CSV tables and plot-ready series.

Fairness table (one row per attack, fixed attack order)::

    attack,average,worst,worst_q,sd,nsd,class_0,...,class_{C-1}

Accuracies are percentages with two decimals; NSD is a ratio with four
decimals, or ``-`` when the average is zero. Rows for AutoAttack (``aa``)
produced elsewhere can be appended and are carried through ``report``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .fairness import FairnessReport

ATTACK_ORDER = ("clean", "fgsm", "pgd20", "cw30", "aa")
SUMMARY_COLUMNS = ("average", "worst", "worst_q", "sd", "nsd")


class ReportError(RuntimeError):
    pass


def fairness_header(num_classes: int) -> list:
    return ["attack", *SUMMARY_COLUMNS, *(f"class_{k}" for k in range(num_classes))]


def _attack_key(name: str):
    return (ATTACK_ORDER.index(name) if name in ATTACK_ORDER else len(ATTACK_ORDER), name)


def fairness_rows(reports: dict) -> list:
    rows = []
    for name in sorted(reports, key=_attack_key):
        rep: FairnessReport = reports[name]
        rows.append([
            name,
            f"{100 * rep.average:.2f}",
            f"{100 * rep.worst:.2f}",
            f"{100 * rep.worst_q:.2f}",
            f"{100 * rep.sd:.2f}",
            rep.nsd_str(4),
            *(f"{100 * a:.2f}" for a in rep.per_class_acc),
        ])
    return rows


def write_fairness_csv(reports: dict, path) -> None:
    if not reports:
        raise ReportError("no reports to write")
    num_classes = {r.num_classes for r in reports.values()}
    if len(num_classes) != 1:
        raise ReportError("reports disagree on the number of classes")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fairness_header(num_classes.pop()))
        w.writerows(fairness_rows(reports))


def read_fairness_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v: str) -> float:
    return float("nan") if v in ("-", "") else float(v)


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def risk_sd_series(records: list) -> list:
    """(epoch, normalized clean risk SD, normalized adversarial risk SD) per epoch."""
    return [(r["epoch"], r["risk_sd_clean"], r["risk_sd_adv"]) for r in records]


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def class_series(curves: dict) -> list:
    """Plot-ready points: each curve's per-class value followed by its average."""
    rows = []
    for name, per_class in curves.items():
        for k, v in enumerate(per_class):
            rows.append([name, str(k), f"{100 * v:.2f}"])
        rows.append([name, "avg", f"{100 * float(np.mean(per_class)):.2f}"])
    return rows


def aggregate_runs(run_dirs, out_dir) -> dict:
    """Merge final tables of several runs and add cross-run medians.

    Writes ``merged.csv``, ``median.csv`` and ``risk_sd_series.csv`` under
    ``out_dir`` and returns their paths.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ReportError("no run directories given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged, series = [], []
    header = None
    for d in run_dirs:
        table = d / "final_report.csv"
        if not table.exists():
            raise ReportError(f"{d} has no final_report.csv")
        rows = read_fairness_csv(table)
        cols = list(rows[0].keys()) if rows else []
        if header is None:
            header = cols
        elif cols != header:
            raise ReportError(f"{d}: class count differs from the other runs")
        for row in rows:
            merged.append({"run": d.name, **row})
        metrics = d / "metrics.jsonl"
        if metrics.exists():
            for epoch, sd_c, sd_a in risk_sd_series(read_metrics(metrics)):
                series.append([d.name, epoch, "" if sd_c is None else f"{sd_c:.6f}", "" if sd_a is None else f"{sd_a:.6f}"])

    paths = {"merged": out_dir / "merged.csv", "median": out_dir / "median.csv",
             "risk_sd_series": out_dir / "risk_sd_series.csv"}
    write_rows(paths["merged"], ["run", *header], [[r["run"], *(r[c] for c in header)] for r in merged])

    value_cols = [c for c in header if c != "attack"]
    attacks = sorted({r["attack"] for r in merged}, key=_attack_key)
    med_rows = []
    for a in attacks:
        group = [r for r in merged if r["attack"] == a]
        row = [a, str(len(group))]
        for c in value_cols:
            vals = np.array([_num(r[c]) for r in group])
            vals = vals[~np.isnan(vals)]
            row.append("-" if vals.size == 0 else f"{np.median(vals):.4f}")
        med_rows.append(row)
    write_rows(paths["median"], ["attack", "runs", *(f"median_{c}" for c in value_cols)], med_rows)
    write_rows(paths["risk_sd_series"], ["run", "epoch", "risk_sd_clean", "risk_sd_adv"], series)
    return paths
