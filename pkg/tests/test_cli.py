import json
import subprocess
import sys

import numpy as np
import pytest

from rankguard import cli
from rankguard.matcore import load_csv, save_csv

from conftest import low_rank


@pytest.fixture
def rank_one_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = np.outer(rng.uniform(1, 2, 20), rng.uniform(1, 2, 15)) + 1e-3 * rng.standard_normal((20, 15))
    path = tmp_path / "x.csv"
    save_csv(path, X)
    return path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_rank_dicmr(rank_one_csv, tmp_path, capsys):
    out_json = tmp_path / "trace.json"
    code, out, _ = run(["rank", rank_one_csv, "--method", "dicmr", "--alpha", "0.5", "--out", out_json], capsys)
    assert code == 0
    assert "selected_rank: 1" in out
    payload = json.loads(out_json.read_text())
    assert payload["schema"] == "rankguard/1"
    assert payload["selected"] == 1 and payload["alpha"] == 0.5
    assert payload["method"] == "dicmr"
    assert len(payload["values"]) == 8


def test_rank_other_methods(rank_one_csv, tmp_path, capsys):
    for argv in (
        ["--method", "pc3"],
        ["--method", "bcv", "--holdouts", "16"],
        ["--method", "gabriel", "--cv-style", "2x2"],
        ["--method", "elbow"],
        ["--method", "threshold", "--threshold", "1.0"],
        ["--method", "ic3", "--engine", "rsvddpd", "--alpha", "0.3"],
    ):
        code, out, err = run(["rank", rank_one_csv, *argv], capsys)
        assert code == 0, (argv, err)
        assert out.strip().startswith("selected_rank:")
    code, _, _ = run(["rank", rank_one_csv, "--method", "pc3", "--out", tmp_path / "t.csv"], capsys)
    assert code == 0 and (tmp_path / "t.csv").read_text().startswith("rank,value\n0,")


def test_rank_errors(rank_one_csv, tmp_path, capsys):
    assert run(["rank", rank_one_csv, "--method", "nope"], capsys)[0] == 2
    code, _, err = run(["rank", rank_one_csv, "--rank-max", "16"], capsys)
    assert code == 1 and "RankOutOfRange" in err
    assert run(["rank", tmp_path / "missing.csv"], capsys)[0] == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3,x\n")
    assert run(["rank", bad], capsys)[0] == 1
    assert run(["rank", rank_one_csv, "--method", "threshold"], capsys)[0] == 2
    assert run(["rank", rank_one_csv, "--method", "ekk", "--cv-style", "2x2"], capsys)[0] == 2
    assert run([], capsys)[0] == 2


def test_bench(tmp_path, capsys):
    prefix = tmp_path / "bench"
    code, out, _ = run(["bench", "--scenario", "S01", "--methods", "pc3", "--reps", "20", "--threads", "1",
                        "--out", prefix], capsys)
    assert code == 0
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert rows[1].split(",")[:5] == ["S01-equal", "pc3", "20", "0", "1.0000"]
    assert "prop (over)" in (tmp_path / "bench.txt").read_text()


def test_bench_deterministic(tmp_path, capsys):
    blobs = []
    for k in range(2):
        prefix = tmp_path / f"b{k}"
        argv = ["bench", "--scenario", "S11", "--scenario", "S21-dec", "--methods", "pc3,bic,elbow",
                "--reps", "3", "--threads", "1", "--seed", "7", "--out", prefix]
        assert run(argv, capsys)[0] == 0
        blobs.append((tmp_path / f"b{k}.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_bench_errors(capsys):
    assert run(["bench", "--scenario", "S01", "--reps", "0"], capsys)[0] == 2
    assert run(["bench", "--scenario", "S99", "--reps", "1"], capsys)[0] == 2
    assert run(["bench", "--scenario", "S01", "--methods", "nope", "--reps", "1"], capsys)[0] == 2
    assert run(["bench", "--reps", "1"], capsys)[0] == 2


def test_bound(tmp_path, capsys):
    out = tmp_path / "curve.csv"
    code, _, _ = run(["bound", "--alpha-list", "0,0.5", "--logratio-min", "0", "--logratio-max", "1",
                      "--steps", "3", "--out", out], capsys)
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "log_ratio,alpha,probability"
    assert len(lines) == 1 + 2 * 3
    first = [ln for ln in lines[1:] if ln.startswith("0,0,")]
    assert float(first[0].split(",")[2]) == pytest.approx(0.75, abs=1e-12)
    assert run(["bound", "--steps", "1"], capsys)[0] == 2
    assert run(["bound", "--alpha-list", "a,b"], capsys)[0] == 2


def test_impute(tmp_path, capsys):
    X = low_rank(30, 20, 2, seed=1) + 1.0
    data, truth, out = tmp_path / "x.csv", tmp_path / "t.csv", tmp_path / "o.csv"
    save_csv(truth, X)
    Xm = X.copy()
    Xm[22:, 15:] = 0.0
    save_csv(data, Xm)
    argv = ["impute", data, "--missing-block", "22:30,15:20", "--alpha", "0", "--rank", "fixed:3",
            "--no-normalize", "--truth", truth, "--out", out]
    code, text, _ = run(argv, capsys)
    assert code == 0
    assert "selected_rank: 3" in text
    rel = float(text.split("rel_rmse:")[1])
    assert rel < 1e-6
    np.testing.assert_allclose(load_csv(out), X, atol=1e-6)


def test_impute_grid_and_errors(tmp_path, capsys):
    X = low_rank(30, 20, 2, seed=1) + 1.0
    data, truth, out = tmp_path / "x.csv", tmp_path / "t.csv", tmp_path / "m.csv"
    save_csv(data, X)
    save_csv(truth, X[22:, 15:])
    argv = ["impute", data, "--missing-block", "22:30,15:20", "--alpha-grid", "0.2,0.4", "--truth", truth,
            "--out", out]
    assert run(argv, capsys)[0] == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "alpha,rank,rel_rmse" and len(lines) == 3
    assert all(ln.split(",")[2] for ln in lines[1:])
    assert run(["monitor", data, "--missing-block", "22:30,15:20", "--alpha-grid", "0.3"], capsys)[0] == 0
    code, _, err = run(["impute", data, "--missing-block", "22:40,15:20"], capsys)
    assert code == 1
    assert run(["impute", data, "--missing-block", "22-30"], capsys)[0] == 2
    assert run(["impute", data, "--missing-block", "22:30,15:20", "--rank", "five"], capsys)[0] == 2
    save_csv(truth, X[:3, :3])
    assert run(["impute", data, "--missing-block", "22:30,15:20", "--truth", truth], capsys)[0] == 1


def test_simulate(tmp_path, capsys):
    out, truth = tmp_path / "s.csv", tmp_path / "l.csv"
    code, text, _ = run(["simulate", "--scenario", "S12", "--rep", "2", "--out", out, "--truth-out", truth], capsys)
    assert code == 0 and "true_rank: 10" in text
    X, L = load_csv(out), load_csv(truth)
    assert X.shape == (50, 40)
    assert int(np.sum(np.linalg.svd(L, compute_uv=False) > 1e-10)) == 10
    again = tmp_path / "s2.csv"
    run(["simulate", "--scenario", "S12", "--rep", "2", "--out", again], capsys)
    assert out.read_bytes() == again.read_bytes()
    assert run(["simulate", "--scenario", "S77", "--out", out], capsys)[0] == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rankguard", "bound", "--steps", "2", "--alpha-list", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "log_ratio,alpha,probability"
    proc = subprocess.run([sys.executable, "-m", "rankguard", "bound", "--steps", "1"], capture_output=True, text=True)
    assert proc.returncode == 2
