import csv
import json

import pytest

from losa.cli import main
from losa.workload import load_trace


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture
def trace(tmp_path):
    path = tmp_path / "w.trace"
    assert main(["gen", "--L", "1024", "--B", "16", "--d", "16", "--H", "2", "--steps", "4",
                 "--active-fraction", "0.3125", "--seed", "7", "-o", str(path)]) == 0
    return path


def test_gen_echoes_config(tmp_path, capsys):
    path = tmp_path / "w.trace"
    rc = main(["gen", "--L", "4096", "--B", "16", "--d", "64", "--H", "2", "--steps", "8",
               "--active-fraction", "0.3125", "--seed", "7", "-o", str(path)])
    assert rc == 0
    assert load_trace(path).header() == {"H": 2, "d": 64, "L": 4096, "B": 16, "S": 8}
    assert "S=8" in capsys.readouterr().out


def test_gen_missing_output_is_usage_error(capsys):
    assert main(["gen", "--L", "64"]) == 2
    assert "required" in capsys.readouterr().err


def test_unknown_flag_rejected(trace, tmp_path):
    assert main(["run", "--trace", str(trace), "--method", "dense", "-o", str(tmp_path / "r"), "--bogus", "1"]) == 2


def test_gen_deterministic(tmp_path):
    args = ["gen", "--L", "128", "--B", "8", "--d", "8", "--H", "1", "--steps", "3", "--seed", "5"]
    main(args + ["-o", str(tmp_path / "a")])
    main(args + ["-o", str(tmp_path / "b")])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_run_dense(trace, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", "--trace", str(trace), "--method", "dense", "-o", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 4 and all(float(r["density"]) == 1.0 for r in rows)


def test_run_losa_top5(trace, tmp_path):
    out = tmp_path / "r.csv"
    rc = main(["run", "--trace", str(trace), "--method", "losa", "--budget", "128", "--page", "16",
               "--kactive", "5", "-o", str(out)])
    assert rc == 0
    rows = read_csv(out)
    assert [int(r["active_count"]) for r in rows] == [16, 5, 5, 5]


def test_run_quest_full_budget_is_exact(trace, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", "--trace", str(trace), "--method", "quest", "--budget", "1024", "-o", str(out)]) == 0
    assert all(float(r["max_abs_err"]) == 0.0 for r in read_csv(out))


def test_compare(trace, tmp_path):
    out = tmp_path / "r.json"
    assert main(["compare", "--trace", str(trace), "-o", str(out), "--format", "json"]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["records"]) == 3 * 4
    assert doc["summary"]["density_ratio"] >= 1.0


def test_compare_full_budget_losa_exact(trace, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["compare", "--trace", str(trace), "--budget", "1024", "--kactive", "16", "-o", str(out)]) == 0
    assert all(float(r["max_abs_err"]) <= 1e-4 for r in read_csv(out) if r["method"] == "losa")


def test_config_file_overrides_defaults(trace, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# benchmark settings\nkactive = 3\nbudget=64\n")
    out = tmp_path / "r.csv"
    assert main(["run", "--trace", str(trace), "--method", "losa", "--config", str(conf), "-o", str(out)]) == 0
    assert [int(r["active_count"]) for r in read_csv(out)][1:] == [3, 3, 3]
    # explicit flags still win over the file
    assert main(["run", "--trace", str(trace), "--method", "losa", "--config", str(conf), "--kactive", "2",
                 "-o", str(out)]) == 0
    assert [int(r["active_count"]) for r in read_csv(out)][1:] == [2, 2, 2]


def test_config_file_unknown_key(trace, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("nonsense=1\n")
    assert main(["run", "--trace", str(trace), "--method", "losa", "--config", str(conf), "-o", "x"]) == 2


def test_bad_engine_config_is_usage_error(trace, tmp_path):
    assert main(["run", "--trace", str(trace), "--method", "quest", "--budget", "0", "-o", str(tmp_path / "r")]) == 2


def test_bad_trace_is_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.trace"
    bad.write_bytes(b"nope")
    assert main(["run", "--trace", str(bad), "--method", "dense", "-o", str(tmp_path / "r")]) == 3
    assert main(["run", "--trace", str(tmp_path / "absent"), "--method", "dense", "-o", str(tmp_path / "r")]) == 3


def test_threads_env(trace, tmp_path, monkeypatch):
    monkeypatch.setenv("LOSA_THREADS", "2")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["compare", "--trace", str(trace), "-o", str(a)]) == 0
    monkeypatch.setenv("LOSA_THREADS", "1")
    assert main(["compare", "--trace", str(trace), "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


class TestLocalityStats:
    def gen(self, tmp_path, fraction, sigma="0.1"):
        path = tmp_path / f"w{fraction}.trace"
        main(["gen", "--L", "32", "--B", "16", "--d", "16", "--H", "2", "--steps", "5",
              "--active-fraction", str(fraction), "--sigma", sigma, "--seed", "3", "-o", str(path)])
        return path

    def stats(self, tmp_path, trace, fmt="json"):
        out = tmp_path / f"s.{fmt}"
        assert main(["locality-stats", "--trace", str(trace), "--format", fmt, "-o", str(out)]) == 0
        return out

    def test_frozen_trace(self, tmp_path):
        doc = json.loads(self.stats(tmp_path, self.gen(tmp_path, 0.0)).read_text())
        assert len(doc["steps"]) == 4
        for s in doc["steps"]:
            assert all(v == 0 for v in s["sorted_delta"])
            assert s["selected_count"] == 1

    def test_concentrated_mass(self, tmp_path):
        doc = json.loads(self.stats(tmp_path, self.gen(tmp_path, 0.25, sigma="5.0")).read_text())
        for s in doc["steps"]:
            assert 1 <= s["selected_count"] <= 4
            assert s["cumulative"][3] == pytest.approx(1.0)

    def test_uniform_noise(self, tmp_path):
        doc = json.loads(self.stats(tmp_path, self.gen(tmp_path, 1.0)).read_text())
        for s in doc["steps"]:
            assert 6 <= s["selected_count"] <= 8
            assert s["sorted_delta"] == sorted(s["sorted_delta"], reverse=True)

    def test_csv(self, tmp_path):
        rows = read_csv(self.stats(tmp_path, self.gen(tmp_path, 0.25), fmt="csv"))
        assert len(rows) == 4 * 16
        assert list(rows[0]) == ["step", "rank", "token", "delta", "cumulative", "selected_count"]
