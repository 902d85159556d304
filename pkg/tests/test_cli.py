import csv
import datetime as dt
import json
import shutil
import subprocess

import numpy as np
import pytest

from fact_rf.cli import main
from fact_rf.simulate import SimulationSpec, generate
from fact_rf.tables import read_table

FAST_FOREST = {"n_trees": 40}


def fmt(v):
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def small_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.random((120, 3))
    y = 3 * X[:, 0] + rng.normal(size=120)
    return write_csv(tmp_path / "d.csv", ["a", "b", "c", "y"],
                     [[*map(fmt, x), fmt(v)] for x, v in zip(X, y)])


@pytest.fixture
def fast_cfg(tmp_path):
    return write_json(tmp_path / "cfg.json", {"forest": FAST_FOREST, "fact": {"k_n": 2}})


def series_csv(path, T=246, dates=None, seed=0):
    rng = np.random.default_rng(seed)
    dates = dates or [dt.date(2000 + m // 12, m % 12 + 1, 1).isoformat() for m in range(T)]
    X = rng.random((T, 3))
    y = rng.normal(size=T)
    return write_csv(path, ["date", "u", "v", "w", "y"],
                     [[d, *map(fmt, x), fmt(v)] for d, x, v in zip(dates, X, y)])


class TestTest:
    def test_writes_results(self, tmp_path, small_csv, fast_cfg, capsys):
        out = tmp_path / "o"
        assert main(["test", str(small_csv), "--response", "y", "--config", str(fast_cfg),
                     "--out", str(out)]) == 0
        rows = read_table(out / "fact_results.csv")
        assert [r["feature"] for r in rows] == ["a", "b", "c"]
        assert float(rows[0]["p_value"]) < 0.05
        doc = json.loads((out / "fact_reports.json").read_text())
        assert len(doc["reports"]) == 3
        assert (out / "fact_results.csv").read_text().startswith("# fact-rf config_hash=")

    def test_feature_selection(self, tmp_path, small_csv, fast_cfg):
        out = tmp_path / "o"
        assert main(["test", str(small_csv), "--response", "y", "--features", "b",
                     "--config", str(fast_cfg), "--out", str(out)]) == 0
        assert [r["feature"] for r in read_table(out / "fact_results.csv")] == ["b"]

    def test_missing_column(self, tmp_path, small_csv, capsys):
        assert main(["test", str(small_csv), "--response", "zz", "--out", str(tmp_path)]) == 2
        assert "'zz'" in capsys.readouterr().err

    def test_three_rows(self, tmp_path, capsys):
        p = write_csv(tmp_path / "t.csv", ["a", "y"], [["0.1", "1"], ["0.5", "2"], ["0.9", "0"]])
        assert main(["test", str(p), "--response", "y", "--out", str(tmp_path)]) == 2
        assert "inference sample too small" in capsys.readouterr().err

    def test_unknown_config_field(self, tmp_path, small_csv):
        cfg = write_json(tmp_path / "bad.json", {"fact": {"varient": "basic"}})
        assert main(["test", str(small_csv), "--response", "y", "--config", str(cfg),
                     "--out", str(tmp_path)]) == 2

    def test_bad_json(self, tmp_path, small_csv):
        (tmp_path / "bad.json").write_text("{nope")
        assert main(["test", str(small_csv), "--response", "y", "--config",
                     str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2

    def test_all_degenerate_exits_numeric(self, tmp_path, fast_cfg):
        x = np.linspace(0, 1, 100)
        rows = [[fmt(a), fmt(b), "1.0"] for a, b in zip(x, x[::-1])]
        p = write_csv(tmp_path / "c.csv", ["a", "b", "y"], rows)
        assert main(["test", str(p), "--response", "y", "--config", str(fast_cfg),
                     "--out", str(tmp_path / "o")]) == 3

    def test_bad_flags(self, small_csv):
        with pytest.raises(SystemExit) as e:
            main(["test", str(small_csv), "--response", "y", "--threads", "0"])
        assert e.value.code == 2
        with pytest.raises(SystemExit) as e:
            main(["test", str(small_csv), "--response", "y", "--seed", "-1"])
        assert e.value.code == 2


class TestImportance:
    def test_scores(self, tmp_path, small_csv):
        out = tmp_path / "o"
        assert main(["importance", str(small_csv), "--response", "y", "--methods", "MDI,MDA",
                     "--reps", "3", "--out", str(out), "--config",
                     str(write_json(tmp_path / "f.json", {"forest": FAST_FOREST}))]) == 0
        rows = read_table(out / "importance.csv")
        assert len(rows) == 6 and {r["method"] for r in rows} == {"MDI", "MDA"}

    def test_unknown_method(self, tmp_path, small_csv, capsys):
        assert main(["importance", str(small_csv), "--response", "y", "--methods", "SHAP",
                     "--out", str(tmp_path)]) == 2
        assert "SHAP" in capsys.readouterr().err


class TestSimulate:
    def conf(self, tmp_path, **extra):
        exp = {"name": "sp", "kind": "size_power", "spec": {"n": 80, "p": 45, "lam": 0.3, "reps": 2},
               "forest": FAST_FOREST, "fact": {"k_n": 2}, "features": [11, 12], "alphas": [0.1]}
        exp.update(extra)
        return write_json(tmp_path / "sim.json", {"experiments": [exp]})

    def test_byte_identical_reruns(self, tmp_path):
        cfg = self.conf(tmp_path)
        outs = []
        for k, threads in enumerate(("1", "3", "1")):
            out = tmp_path / f"o{k}"
            assert main(["simulate", "--config", str(cfg), "--threads", threads,
                         "--out", str(out)]) == 0
            outs.append((out / "sp.csv").read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_seed_changes_output(self, tmp_path):
        cfg = self.conf(tmp_path, kind="qq", feature=12, alphas=None)
        exp = json.loads(cfg.read_text())
        del exp["experiments"][0]["alphas"], exp["experiments"][0]["features"]
        write_json(cfg, exp)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(a)]) == 0
        assert main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(b)]) == 0
        assert (a / "sp.csv").read_bytes() != (b / "sp.csv").read_bytes()
        assert (a / "sp_ks.csv").exists()

    def test_invalid_alpha(self, tmp_path):
        assert main(["simulate", "--config", str(self.conf(tmp_path, alphas=[1.0])),
                     "--out", str(tmp_path / "o")]) == 2

    def test_unknown_kind(self, tmp_path):
        assert main(["simulate", "--config", str(self.conf(tmp_path, kind="histogram")),
                     "--out", str(tmp_path / "o")]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path)]) == 2


class TestRolling:
    def args(self, path, out, *extra):
        return ["rolling", str(path), "--date-column", "date", "--response", "y",
                "--out", str(out), *extra]

    def test_window_count(self, tmp_path):
        p = series_csv(tmp_path / "s.csv")
        cfg = write_json(tmp_path / "f.json", {"forest": FAST_FOREST})
        assert main(self.args(p, tmp_path / "o", "--features", "u", "--config", str(cfg))) == 0
        rows = read_table(tmp_path / "o" / "rolling.csv")
        assert len(rows) == 63
        assert rows[-1]["window_end"] == "2020-06-01"

    def test_non_monotone_dates(self, tmp_path, capsys):
        dates = [dt.date(2000, 1, 1) + dt.timedelta(days=i) for i in range(100)]
        dates[50] = dates[10]
        p = series_csv(tmp_path / "s.csv", 100, [d.isoformat() for d in dates])
        assert main(self.args(p, tmp_path / "o")) == 2
        assert "strictly increasing" in capsys.readouterr().err

    def test_window_too_long(self, tmp_path):
        p = series_csv(tmp_path / "s.csv", 50)
        assert main(self.args(p, tmp_path / "o")) == 2

    def test_bad_fdr(self, tmp_path):
        p = series_csv(tmp_path / "s.csv", 80)
        with pytest.raises(SystemExit):
            main(self.args(p, tmp_path / "o", "--fdr", "1.5"))

    @pytest.mark.slow
    def test_null_fdr_flags_few(self, tmp_path):
        p = series_csv(tmp_path / "s.csv", seed=5)
        assert main(self.args(p, tmp_path / "o", "--fdr", "0.2", "--seed", "0")) == 0
        rows = read_table(tmp_path / "o" / "rolling.csv")
        assert len(rows) == 63 * 3
        assert np.mean([r["rejected"] == "true" for r in rows]) < 0.25


@pytest.mark.slow
def test_case_one_signal_detected(tmp_path):
    d = generate(SimulationSpec(300, 200, 0.3, reps=1), 0)
    names = d.names()
    rows = [[*map(fmt, x), fmt(v)] for x, v in zip(d.features, d.response)]
    p = write_csv(tmp_path / "case1.csv", names + ["Y"], rows)
    assert main(["test", str(p), "--response", "Y", "--features", "X11,X12",
                 "--out", str(tmp_path / "o")]) == 0
    res = {r["feature"]: float(r["p_value"]) for r in read_table(tmp_path / "o" / "fact_results.csv")}
    assert res["X11"] < 0.05


@pytest.mark.skipif(shutil.which("fact-rf") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["fact-rf", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "rolling" in r.stdout
