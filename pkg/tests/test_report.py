import json
import math
from pathlib import Path

import numpy as np
import pytest

from losa.engine import EngineConfig, StepStats, run_block
from losa.errors import ReportError, ShapeError
from losa.report import CSV_COLUMNS, RunReport, attach_errors, compute_error, density_ratio, emit, to_csv
from losa.workload import GenConfig, gen_synthetic

GOLDEN = Path(__file__).parent / "golden" / "compare_small.csv"


def stat(step, density, method="quest", is_init=False):
    return StepStats(step, method, 4, 1.0, 8, density * 64, density, 0.0, 0, 64, is_init)


class TestError:
    def test_identical(self, rng):
        a = rng.standard_normal((4, 3))
        assert compute_error(a, a) == {"max_abs_err": 0.0, "mse": 0.0, "rel_fro_err": 0.0}

    def test_single_cell(self, rng):
        a = rng.standard_normal((4, 3))
        b = a.copy()
        b[2, 1] += 0.5
        e = compute_error(b, a)
        assert e["max_abs_err"] == pytest.approx(0.5, abs=1e-15)
        assert e["mse"] == pytest.approx(0.25 / 12, rel=1e-12)

    def test_matches_loop(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        mx, sq, ref = 0.0, 0.0, 0.0
        for i in range(5):
            for j in range(7):
                diff = a[i, j] - b[i, j]
                mx = max(mx, abs(diff))
                sq += diff * diff
                ref += b[i, j] ** 2
        e = compute_error(a, b)
        assert e["max_abs_err"] == pytest.approx(mx, rel=1e-12)
        assert e["mse"] == pytest.approx(sq / 35, rel=1e-12)
        assert e["rel_fro_err"] == pytest.approx(math.sqrt(sq) / math.sqrt(ref), rel=1e-12)

    def test_zero_oracle(self):
        assert compute_error(np.ones((2, 2)), np.zeros((2, 2)))["rel_fro_err"] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_error(np.ones((2, 2)), np.ones((2, 3)))


class TestDensityRatio:
    def test_identical(self):
        s = [stat(0, 0.3), stat(1, 0.5)]
        assert density_ratio(s, s) == 1.0

    def test_arithmetic(self):
        assert density_ratio([0.4, 0.4], [0.2, 0.2]) == 2.0

    def test_zero_losa_density(self):
        assert density_ratio([0.4], [0.0]) == math.inf

    def test_provenance_mismatch(self):
        with pytest.raises(ReportError):
            density_ratio([0.1, 0.2], [0.1])
        with pytest.raises(ReportError):
            density_ratio([stat(0, 0.1)], [stat(1, 0.1, "losa")])

    def test_all_active_gives_one(self):
        w = gen_synthetic(GenConfig(L=1024, B=8, d=16, H=2, S=4, seed=1))
        cfg = EngineConfig(budget=32, page_size=8, k_active=8)
        _, q = run_block(w, cfg, "quest")
        _, l = run_block(w, cfg, "losa")
        assert density_ratio(q[1:], l[1:]) == 1.0


def small_compare_report():
    w = gen_synthetic(GenConfig(L=256, B=8, d=8, H=2, S=3, active_fraction=0.25, seed=21))
    cfg = EngineConfig(budget=32, page_size=8, k_active=2)
    report = RunReport(config={"seed": 21, "budget": 32})
    dense, ds = run_block(w, cfg, "dense")
    for m in ("dense", "quest", "losa"):
        out, st = (dense, ds) if m == "dense" else run_block(w, cfg, m)
        attach_errors(st, out, dense)
        report.add(st)
    report.summarize()
    return report


class TestEmit:
    def test_empty_run_is_header_only(self, tmp_path):
        path = tmp_path / "r.csv"
        emit(RunReport(config={}), "csv", path)
        assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"

    def test_json_round_trip(self, tmp_path):
        report = small_compare_report()
        path = tmp_path / "r.json"
        emit(report, "json", path)
        doc = json.loads(path.read_text())
        assert doc["schema_version"] == 1
        assert doc["columns"] == list(CSV_COLUMNS)
        assert len(doc["records"]) == 9
        for rec, st in zip(doc["records"], report.records):
            for key in ("density", "mse", "rel_fro_err", "union_pages"):
                assert rec[key] == float(format(getattr(st, key), ".9g"))
            assert rec["step"] == st.step and rec["method"] == st.method
        assert doc["summary"]["density_ratio"] == pytest.approx(report.summary["density_ratio"], rel=1e-8)

    def test_reemit_identical_bytes(self, tmp_path):
        report = small_compare_report()
        for fmt in ("csv", "json"):
            a, b = tmp_path / f"a.{fmt}", tmp_path / f"b.{fmt}"
            emit(report, fmt, a)
            emit(report, fmt, b)
            assert a.read_bytes() == b.read_bytes()

    def test_records_sorted_by_step_then_method(self):
        report = small_compare_report()
        assert [(r.step, r.method) for r in report.records][:4] == [
            (0, "dense"), (0, "quest"), (0, "losa"), (1, "dense")
        ]

    def test_golden_file(self):
        assert to_csv(small_compare_report()) == GOLDEN.read_text()

    def test_per_head_json(self, tmp_path):
        report = small_compare_report()
        report.per_head = True
        path = tmp_path / "r.json"
        emit(report, "json", path)
        doc = json.loads(path.read_text())
        assert len(doc["per_head"]) == 9 * 2

    def test_bad_format_and_path(self, tmp_path):
        with pytest.raises(ReportError):
            emit(RunReport(config={}), "xml", tmp_path / "r")
        with pytest.raises(OSError, match="missing"):
            emit(RunReport(config={}), "csv", tmp_path / "missing" / "r.csv")

    def test_dense_records_are_exact(self):
        for r in small_compare_report().by_method("dense"):
            assert r.density == 1.0 and r.max_abs_err == 0.0
