"""Deviation metrics, percentile summaries, and method comparison tables."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PERCENTILES = (10, 25, 50, 75, 90)
DEFAULT_THRESHOLD_MM = 2.0
CSV_COLUMNS = ("method", "p10", "p25", "p50", "p75", "p90", "mean", "fpr_percent", "n")


@dataclass
class EvalReport:
    method: str
    deviations_mm: list
    percentiles: dict
    mean_mm: float
    fpr_percent: float
    threshold_mm: float = DEFAULT_THRESHOLD_MM
    count: int = 0
    max_mm: float = 0.0
    extra: dict = field(default_factory=dict)


def deviation(found, gold):
    """Euclidean distance (mm) between two displacements in the shift plane."""
    a = np.asarray(found.as_array() if hasattr(found, "as_array") else found, dtype=np.float64)
    b = np.asarray(gold.as_array() if hasattr(gold, "as_array") else gold, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("deviation needs finite displacements")
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def percentile(values, p):
    """Linear interpolation between closest ranks: position (n - 1) * p / 100."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    pos = (len(x) - 1) * p / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(x) - 1)
    return float(x[lo] + (pos - lo) * (x[hi] - x[lo]))


def aggregate(deviations, threshold_mm=DEFAULT_THRESHOLD_MM, method=""):
    devs = np.asarray(deviations, dtype=np.float64).ravel()
    if devs.size == 0:
        raise ValidationError("cannot aggregate an empty deviation list")
    if not np.all(np.isfinite(devs)) or np.any(devs < 0):
        raise ValidationError("deviations must be finite and >= 0")
    return EvalReport(
        method=method,
        deviations_mm=devs.tolist(),
        percentiles={p: percentile(devs, p) for p in PERCENTILES},
        mean_mm=float(devs.mean()),
        fpr_percent=100.0 * float(np.count_nonzero(devs > threshold_mm)) / devs.size,
        threshold_mm=float(threshold_mm),
        count=int(devs.size),
        max_mm=float(devs.max()),
    )


def _row(r):
    return [r.method] + [r.percentiles[p] for p in PERCENTILES] + [r.mean_mm, r.fpr_percent, r.count]


def compare_methods(reports):
    """Return ``(markdown, csv_text)`` with one row per report, sorted by method label."""
    if not reports:
        raise ValidationError("need at least one report")
    ordered = sorted(reports, key=lambda r: r.method)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in ordered:
        w.writerow([repr(v) if isinstance(v, float) else v for v in _row(r)])
    lines = [
        "| Method | 10th | 25th | 50th | 75th | 90th | Mean | FPR (%) | Max | n |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for r in ordered:
        cells = [f"{r.percentiles[p]:.2f}" for p in PERCENTILES]
        cells += [f"{r.mean_mm:.2f}", f"{r.fpr_percent:.2f}", f"{r.max_mm:.2f}", str(r.count)]
        lines.append(f"| {r.method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n", buf.getvalue()


def read_report_csv(text):
    """Parse CSV produced by :func:`compare_methods` back into dict rows."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {"method": rec["method"], "n": int(rec["n"])}
        for k in CSV_COLUMNS[1:-1]:
            row[k] = float(rec[k])
        rows.append(row)
    return rows


def final_deviations(traces, gold_by_case=None, iteration=None):
    """Per-method deviations from traces.

    ``traces`` is a list of per-case record lists (dicts with ``case_id``,
    ``method``, ``result`` and optionally ``gold``).  With ``iteration`` set,
    the result after that iteration is used (or the last one if the trace
    stopped earlier).
    """
    out = {}
    for recs in traces:
        if not recs:
            continue
        chosen = recs[-1]
        if iteration is not None:
            within = [r for r in recs if r["iteration"] <= iteration]
            chosen = within[-1] if within else recs[0]
        case_id = chosen["case_id"]
        gold = chosen.get("gold")
        if gold_by_case is not None and case_id in gold_by_case:
            gold = gold_by_case[case_id]
        if gold is None:
            raise ValidationError(f"no gold displacement for case {case_id!r}")
        out.setdefault(chosen["method"], []).append(deviation(chosen["result"], gold))
    return out
