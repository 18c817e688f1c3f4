import hashlib
import json
import os
import statistics
import subprocess
import sys

import pytest

from clickrel.cli import dispatch
from clickrel.simulator import SimConfig, generate_log


def run(*args, stdin=None, cwd=None, env=None):
    return subprocess.run([sys.executable, "-m", "clickrel", *args], input=stdin, capture_output=True, cwd=cwd,
                          env=env)


def error_of(proc):
    return json.loads(proc.stderr.decode().strip().splitlines()[-1])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert dispatch(["simulate", "--queries", "60", "--seed", "7", "--out", str(d / "log.tsv"),
                     "--truth", str(d / "truth.tsv")]) == 0
    return d


def test_stdin_pipeline_exit_zero():
    sim_out = run("simulate", "--queries", "20", "--seed", "7")
    assert sim_out.returncode == 0
    agg = run("aggregate", stdin=sim_out.stdout)
    assert agg.returncode == 0
    lab = run("label", "--formula", "cdr", stdin=agg.stdout)
    assert lab.returncode == 0
    rows = lab.stdout.decode().splitlines()
    assert rows and all(len(r.split("\t")) == 6 for r in rows)
    assert all(0 <= float(r.split("\t")[4]) <= 1 for r in rows)


def test_unknown_flag_is_usage_error():
    proc = run("aggregate", "--bogus")
    assert proc.returncode == 2
    assert b"usage:" in proc.stderr
    assert error_of(proc)["error"]["category"] == "usage"


def test_data_error_exit_three(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_bytes(b"r1\tq\tu\tT\tB\t0\t0\t5\n")
    proc = run("aggregate", str(bad), str(tmp_path / "out.tsv"))
    assert proc.returncode == 3
    err = error_of(proc)
    assert err["exit_code"] == 3 and err["error"]["type"] == "InvariantViolation" and err["error"]["line"] == 1
    # nothing committed on failure
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.tsv"]


def test_missing_input_is_usage_error(tmp_path):
    proc = run("stats", str(tmp_path / "nope.tsv"))
    assert proc.returncode == 2


def test_bad_setting_is_usage_error(sim):
    proc = run("simulate", "--queries", "5", "--set", "exam_decay=3", "--out", "-")
    assert proc.returncode == 2
    proc = run("label", "--dwell-missing", "median", str(sim / "log.tsv"))
    assert proc.returncode == 2


def test_threads_env_validated(sim):
    env = dict(os.environ, CLICKREL_THREADS="zero")
    assert run("stats", str(sim / "log.tsv"), env=env).returncode == 2


def test_manifest_digests_reproducible(tmp_path):
    outs = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        d.mkdir()
        assert dispatch(["simulate", "--queries", "30", "--seed", "3", "--out", str(d / "log.tsv")]) == 0
        assert dispatch(["aggregate", "--threads", str(1 + 2 * i), str(d / "log.tsv"), str(d / "pairs.tsv")]) == 0
        m = json.loads((d / "pairs.tsv.manifest.json").read_text())
        outs.append(m)
        assert m["subcommand"] == "aggregate" and "wall_time_s" in m
        assert m["outputs"][str(d / "pairs.tsv")]["sha256"] == hashlib.sha256((d / "pairs.tsv").read_bytes()).hexdigest()
    assert [list(m["inputs"].values()) for m in outs][0] == [list(m["inputs"].values()) for m in outs][1]
    assert list(outs[0]["outputs"].values()) == list(outs[1]["outputs"].values())


def test_explicit_manifest_for_stdout(tmp_path, sim):
    man = tmp_path / "m.json"
    proc = run("aggregate", "--manifest", str(man), str(sim / "log.tsv"))
    assert proc.returncode == 0
    m = json.loads(man.read_text())
    assert m["summary"]["pairs"] == len(proc.stdout.splitlines())


def test_stats_match_simulator_counters(sim, tmp_path):
    _, _, st = generate_log(SimConfig(n_queries=60, rng_seed=7))
    out = tmp_path / "stats.json"
    assert dispatch(["stats", "--out", str(out), str(sim / "log.tsv")]) == 0
    s = json.loads(out.read_text())
    assert (s["rows"], s["requests"], s["queries"], s["clicks"], s["clicked_impressions"]) == (
        st.rows, st.requests, st.queries, st.clicks, st.clicked_impressions)
    assert s["dwell_known"] == len(st.dwell_values)
    assert s["dwell_mean"] == pytest.approx(statistics.fmean(st.dwell_values))
    assert s["dwell_median"] == statistics.median(st.dwell_values)
    assert s["click_rank_histogram"] == [st.click_rank_hist.get(r, 0) for r in range(len(s["click_rank_histogram"]))]
    assert {int(k): v for k, v in s["docs_per_query_histogram"].items()} == dict(st.docs_per_query_hist)
    assert s["clicked_pair_fraction"] + s["unclicked_pair_fraction"] == pytest.approx(1.0)


def test_full_chain(sim, tmp_path):
    d = tmp_path
    log, truth = str(sim / "log.tsv"), str(sim / "truth.tsv")
    assert dispatch(["curate", log, str(d / "cur.tsv")]) == 0
    assert dispatch(["aggregate", str(d / "cur.tsv"), str(d / "pairs.tsv")]) == 0
    assert dispatch(["label", "--weights", "views", str(d / "pairs.tsv"), str(d / "lab.tsv")]) == 0
    assert dispatch(["negatives", "--k", "1", "--seed", "2", str(d / "lab.tsv"), str(d / "lab.tsv"),
                     str(d / "neg.tsv")]) == 0
    (d / "train.tsv").write_bytes((d / "lab.tsv").read_bytes() + (d / "neg.tsv").read_bytes())
    assert dispatch(["train-toy", "--epochs", "3", "--head-out", str(d / "head.bin"), str(d / "train.tsv"),
                     truth, str(d / "emb.bin")]) == 0
    assert dispatch(["score", "--head", str(d / "head.bin"), "--embeddings", str(d / "emb.bin"), truth,
                     str(d / "toy.scores")]) == 0
    assert dispatch(["baseline-bm25", "--corpus-format", "testset", truth, truth, str(d / "bm25.scores")]) == 0
    for name in ("toy", "bm25"):
        assert dispatch(["eval", "--per-query", str(d / f"{name}.pq"), "--out", str(d / f"{name}.json"),
                         truth, str(d / f"{name}.scores")]) == 0
        res = json.loads((d / f"{name}.json").read_text())
        assert 0 <= res["mean"] <= 1 and res["queries"] == 60
    assert dispatch(["sigtest", "--samples", "2000", "--out", str(d / "sig.json"), str(d / "toy.pq"),
                     str(d / "bm25.pq")]) == 0
    assert 0 < json.loads((d / "sig.json").read_text())["p_value"] <= 1
    assert dispatch(["correlate", "--out", str(d / "corr.tsv"), str(d / "pairs.tsv"), truth]) == 0
    schemes = [line.split("\t")[0] for line in (d / "corr.tsv").read_text().splitlines()]
    assert "cdr" in schemes and "rank" in schemes
    oracle = run("eval", "--baseline", "oracle", truth)
    assert oracle.returncode == 0 and json.loads(oracle.stdout)["mean"] <= 1.0
