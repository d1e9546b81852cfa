"""Error metrics against the dense oracle, density summaries and CSV/JSON output.

CSV column order is fixed by ``CSV_COLUMNS``. Floats are written with 9
significant digits so that re-emitting the same report gives the same
bytes and parsing recovers the written values exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import StepStats
from .errors import ReportError, ShapeError

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "step",
    "method",
    "active_count",
    "union_pages",
    "pages_total",
    "density",
    "kv_elements_loaded",
    "max_abs_err",
    "mse",
    "rel_fro_err",
)
METHOD_ORDER = {"dense": 0, "quest": 1, "losa": 2}


def compute_error(O_method, O_dense) -> dict:
    a = np.asarray(O_method, dtype=np.float64)
    b = np.asarray(O_dense, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare outputs of shape {a.shape} and {b.shape}")
    diff = a - b
    ref = float(np.linalg.norm(b))
    return {
        "max_abs_err": float(np.abs(diff).max()) if diff.size else 0.0,
        "mse": float((diff * diff).mean()) if diff.size else 0.0,
        "rel_fro_err": float(np.linalg.norm(diff)) / ref if ref > 0 else 0.0,
    }


def attach_errors(stats: Sequence[StepStats], outputs, dense_outputs) -> None:
    if len(outputs) != len(dense_outputs):
        raise ReportError(f"{len(outputs)} method outputs but {len(dense_outputs)} dense outputs")
    for st, o, od in zip(stats, outputs, dense_outputs):
        err = compute_error(o, od)
        st.max_abs_err, st.mse, st.rel_fro_err = err["max_abs_err"], err["mse"], err["rel_fro_err"]


def _densities(stats) -> list[float]:
    return [s.density if isinstance(s, StepStats) else float(s) for s in stats]


def density_ratio(quest_stats, losa_stats) -> float:
    """mean(quest density) / mean(losa density); ``inf`` if LoSA loaded nothing.

    Accepts StepStats records or bare densities. Step records must pair up
    one to one (same steps of the same workload).
    """
    if len(quest_stats) != len(losa_stats) or not quest_stats:
        raise ReportError(f"cannot pair {len(quest_stats)} quest records with {len(losa_stats)} losa records")
    q_steps = [s.step for s in quest_stats if isinstance(s, StepStats)]
    l_steps = [s.step for s in losa_stats if isinstance(s, StepStats)]
    if q_steps and l_steps and q_steps != l_steps:
        raise ReportError("quest and losa records cover different steps")
    q = float(np.mean(_densities(quest_stats)))
    l = float(np.mean(_densities(losa_stats)))
    if l == 0.0:
        return math.inf
    return q / l


def sparse_steps(stats: Sequence[StepStats]) -> list[StepStats]:
    """Records excluding LoSA's dense initialization steps."""
    return [s for s in stats if not s.is_init]


@dataclass
class RunReport:
    config: dict
    records: list[StepStats] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    per_head: bool = False

    def add(self, stats: Sequence[StepStats]) -> None:
        self.records.extend(stats)
        self.records.sort(key=lambda s: (s.step, METHOD_ORDER.get(s.method, 99)))

    def by_method(self, method: str) -> list[StepStats]:
        return [r for r in self.records if r.method == method]

    def summarize(self) -> dict:
        methods = sorted({r.method for r in self.records}, key=lambda m: METHOD_ORDER.get(m, 99))
        summary: dict = {"mean_density": {}, "max_abs_err": {}, "max_rel_fro_err": {}}
        for m in methods:
            recs = self.by_method(m)
            summary["mean_density"][m] = float(np.mean([r.density for r in recs]))
            errs = [r.max_abs_err for r in recs if r.max_abs_err is not None]
            rels = [r.rel_fro_err for r in recs if r.rel_fro_err is not None]
            summary["max_abs_err"][m] = max(errs) if errs else None
            summary["max_rel_fro_err"][m] = max(rels) if rels else None
        if "quest" in methods and "losa" in methods:
            losa = self.by_method("losa")
            init_steps = {r.step for r in losa if r.is_init}
            quest = [r for r in self.by_method("quest") if r.step not in init_steps]
            losa = sparse_steps(losa)
            if quest:
                summary["sparse_mean_density"] = {
                    "quest": float(np.mean(_densities(quest))),
                    "losa": float(np.mean(_densities(losa))),
                }
                summary["density_ratio"] = density_ratio(quest, losa)
        self.summary = summary
        return summary


def _num(x):
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    if x.is_integer() and abs(x) < 1e15:
        return int(x)
    return float(format(x, ".9g"))


def _cell(x) -> str:
    v = _num(x)
    if v is None:
        return ""
    return format(v, ".9g") if isinstance(v, float) else str(v)


def record_row(r: StepStats) -> dict:
    return {
        "step": r.step,
        "method": r.method,
        "active_count": r.active_count,
        "union_pages": r.union_pages,
        "pages_total": r.pages_total,
        "density": r.density,
        "kv_elements_loaded": r.kv_elements_loaded,
        "max_abs_err": r.max_abs_err,
        "mse": r.mse,
        "rel_fro_err": r.rel_fro_err,
    }


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, str):
        return obj
    return _num(obj)


def to_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.records:
        row = record_row(r)
        writer.writerow([row[c] if c == "method" else _cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def to_json(report: RunReport) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": report.config,
        "columns": list(CSV_COLUMNS),
        "records": [record_row(r) for r in report.records],
        "summary": report.summary,
    }
    if report.per_head:
        doc["per_head"] = [
            {
                "step": r.step,
                "method": r.method,
                "head": h,
                "union_pages": len(hs.union_pages),
                "union_positions": hs.union_positions,
                "density": hs.union_positions / r.prefix_len if r.prefix_len else 1.0,
            }
            for r in report.records
            for h, hs in enumerate(r.heads)
        ]
    return json.dumps(_clean(doc), indent=2, sort_keys=False) + "\n"


def emit(report: RunReport, fmt: str, path) -> None:
    if fmt == "csv":
        text = to_csv(report)
    elif fmt == "json":
        text = to_json(report)
    else:
        raise ReportError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
