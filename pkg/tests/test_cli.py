import json
import os
import subprocess
import sys

import numpy as np
import pytest

from clrsumma import cli, tiling
from clrsumma.runtime import spawn_grid
from clrsumma.tiling import Tiling


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for name, args in {
        "r1": ["--kind", "random", "--n", 64, "--tile", 8, "--seed", 1, "--eps-lr", "none"],
        "r2": ["--kind", "random", "--n", 64, "--tile", 8, "--seed", 2, "--eps-lr", "none"],
        "big1": ["--kind", "random", "--n", 128, "--tile", 8, "--seed", 1, "--eps-lr", "none"],
        "big2": ["--kind", "random", "--n", 128, "--tile", 8, "--seed", 2, "--eps-lr", "none"],
        "ovl": ["--kind", "overlap"],
    }.items():
        assert cli.main(["gen", *map(str, args), "--out", str(d / f"{name}.clrm")]) == 0
    with spawn_grid(1, 1, 1) as g:
        tiling.save(tiling.identity(Tiling.uniform(64, 8), g), d / "eye.clrm")
    return d


# -- gen ------------------------------------------------------------------------


def test_gen_small_overlap(capsys, tmp_path):
    code, rep = run(capsys, "gen", "--kind", "overlap", "--clusters", 2, "--points", 4, "--out", tmp_path / "s.clrm")
    assert code == 0
    assert rep["dims"] == [8, 8] and rep["tile_grid"] == [2, 2]
    assert rep["file_bytes"] == (tmp_path / "s.clrm").stat().st_size
    assert rep["flags"]["seed"] == 0 and "workers_cap" in rep


def test_gen_coulomb_compresses(capsys, tmp_path):
    code, rep = run(capsys, "gen", "--kind", "coulomb", "--out", tmp_path / "v.clrm", "--report", tmp_path / "v.json")
    assert code == 0
    assert rep["compression_ratio"] < 1.0
    assert rep["tiles"]["empty"] == 0
    assert json.loads((tmp_path / "v.json").read_text()) == rep


def test_gen_same_seed_identical_files(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen", "--kind", "overlap", "--seed", "7", "--out", str(tmp_path / f"{name}.clrm")]) == 0
    assert (tmp_path / "a.clrm").read_bytes() == (tmp_path / "b.clrm").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["gen", "--kind", "random", "--clusters", "3", "--out", "x"],
        ["gen", "--kind", "overlap", "--ridge", "1", "--out", "x"],
        ["gen", "--kind", "coulomb", "--gamma", "1", "--out", "x"],
        ["gen", "--kind", "overlap", "--n", "8", "--out", "x"],
        ["gen", "--kind", "banana", "--out", "x"],
        ["gen", "--kind", "random"],
        ["multiply", "--a", "x", "--b", "y", "--grid", "2by2"],
        ["multiply", "--a", "x", "--b", "y", "--issue", "0"],
        ["invsqrt", "--m", "x", "--hist-iter", "0"],
    ],
)
def test_usage_errors(capsys, tmp_path, argv):
    argv = [str(tmp_path / a) if a == "x" else a for a in argv]
    assert cli.main(argv) == cli.EXIT_USAGE
    capsys.readouterr()


def test_missing_file_is_runtime_error(capsys, tmp_path):
    assert cli.main(["multiply", "--a", str(tmp_path / "no"), "--b", str(tmp_path / "no")]) == cli.EXIT_RUNTIME
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"


# -- multiply -------------------------------------------------------------------


def test_multiply_identity_exact(capsys, files):
    code, rep = run(capsys, "multiply", "--a", files / "eye.clrm", "--b", files / "r1.clrm", "--repeat", 2)
    assert code == 0 and rep["ok"]
    (r,) = rep["runs"]
    assert r["max_abs_err"] == 0.0
    assert r["issue"] == "opt" and r["issue_depth"] == 2
    assert r["quiescent"] and r["leaked"] == []


def test_multiply_single_rank_prediction(capsys, files):
    code, rep = run(capsys, "multiply", "--a", files / "r1.clrm", "--b", files / "r2.clrm", "--grid", "1x1",
                    "--issue", 1, "--repeat", 1, "--check-tol", 1e-12)
    assert code == 0
    r = rep["runs"][0]
    n, k = 64, 8
    assert r["predicted_peak_elements"]["dense"] == 3 * n * n + 2 * n * k
    assert r["predicted_peak_elements"]["sparse"] == r["predicted_peak_elements"]["dense"]
    assert r["mode"] == "single_issue" and r["rel_fro_err"] <= 1e-12


def test_multiply_incompatible(capsys, files, tmp_path):
    cli.main(["gen", "--kind", "random", "--n", "48", "--tile", "8", "--out", str(tmp_path / "m.clrm")])
    capsys.readouterr()
    assert cli.main(["multiply", "--a", str(files / "r1.clrm"), "--b", str(tmp_path / "m.clrm")]) == cli.EXIT_RUNTIME


def test_multiply_delay_speedup_and_trace(capsys, files, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, rep = run(capsys, "multiply", "--a", files / "big1.clrm", "--b", files / "big2.clrm", "--issue", "1,opt",
                    "--net-delay-ms", 1, "--repeat", 3, "--trace", trace, "--report", tmp_path / "r.json")
    assert code == 0
    assert rep["speedup_vs_first"]["opt"] > 1.0
    one, opt = rep["runs"]
    assert one["overlap_fraction"] == 0.0 < opt["overlap_fraction"]
    recs = [json.loads(line) for line in trace.read_text().splitlines()]
    assert {r["issue"] for r in recs} == {"1", "opt"}
    assert any(r.get("kind") == "message" for r in recs)
    for r in recs:
        assert r["end"] >= r["start"] and "rank" in r


def test_cli_honours_worker_env(files):
    env = dict(os.environ, CLR_WORKERS="1")
    out = subprocess.run(
        [sys.executable, "-m", "clrsumma", "multiply", "--a", str(files / "r1.clrm"), "--b", str(files / "r2.clrm"),
         "--repeat", "1", "--workers-per-rank", "4"],
        capture_output=True, text=True, env=env, check=True,
    )
    rep = json.loads(out.stdout)
    assert rep["workers_cap"] == 1 and rep["clr_workers_env"] == "1"


# -- invsqrt --------------------------------------------------------------------


def test_invsqrt_identity(capsys, files, tmp_path):
    code, rep = run(capsys, "invsqrt", "--m", files / "eye.clrm", "--eps-lr", "none", "--out", tmp_path / "z.clrm")
    assert code == 0 and rep["converged"]
    assert rep["history"][-1] <= 1e-10 and rep["iterations"] <= 4
    with spawn_grid(1, 1, 1) as g:
        z = tiling.gather_dense(tiling.load(tmp_path / "z.clrm", g))
    assert np.allclose(z, np.eye(64), atol=1e-10)


def test_invsqrt_dense_and_clr_iteration_parity(capsys, files):
    counts = []
    for eps in ("none", "1e-6"):
        code, rep = run(capsys, "invsqrt", "--m", files / "ovl.clrm", "--eps-lr", eps, "--tol", 1e-5)
        assert code == 0
        counts.append(rep["iterations"])
    assert abs(counts[0] - counts[1]) <= 1


def test_invsqrt_histograms(capsys, files, tmp_path):
    hist = tmp_path / "h.json"
    code, rep = run(capsys, "invsqrt", "--m", files / "ovl.clrm", "--max-iter", 5, "--hist", hist)
    # five iterations cannot reach 1e-10
    assert code == cli.EXIT_CHECK_FAILED and not rep["converged"]
    h = json.loads(hist.read_text())
    assert h["iteration"] == 5 and set(h["matrices"]) == {"X", "Y", "Z", "T"}
    for counts in h["matrices"].values():
        mode = max(counts, key=counts.get)
        assert int(mode) <= 12 // 4
    assert len(rep["histograms"]) == 5 and len(rep["iteration_times"]) == 5


def test_invsqrt_not_spd(capsys, files, tmp_path):
    with spawn_grid(1, 1, 1) as g:
        t = Tiling.uniform(8, 4)
        tiling.save(tiling.from_dense(-np.eye(8), t, t, None, 0.0, g), tmp_path / "neg.clrm")
    code, rep = run(capsys, "invsqrt", "--m", tmp_path / "neg.clrm", "--eps-lr", "none")
    assert code == cli.EXIT_RUNTIME and rep["error"] == "not_spd"
