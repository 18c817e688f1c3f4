import io

import pytest

from clickrel.aggregation import aggregate, write_pairs
from clickrel.curation import CurationPolicy, curate_requests
from clickrel.labeling import DwellMissing, LabelConfig, label_rows
from clickrel.pipeline import (
    THREADS_ENV,
    aggregate_file,
    curate_file,
    default_threads,
    detect_log_layout,
    iter_chunk,
    label_file,
    simulate_files,
    split_lines,
    split_log,
)
from clickrel.records import LOG_COLUMNS, write_labeled, write_log, write_test_set
from clickrel.simulator import SimConfig, generate_log, iter_simulation


@pytest.fixture(scope="module")
def sim_log(tmp_path_factory):
    cfg = SimConfig(n_queries=120, rng_seed=11)
    reqs, _, _ = generate_log(cfg)
    path = tmp_path_factory.mktemp("sim") / "log.tsv"
    with open(path, "wb") as f:
        write_log(f, reqs)
    return str(path), reqs, cfg


def test_split_lines_covers_file_at_line_starts(tmp_path):
    path = tmp_path / "lines.txt"
    lines = [f"line {i} {'x' * (i % 13)}\n".encode() for i in range(200)]
    path.write_bytes(b"".join(lines))
    for n in (1, 2, 3, 7, 50, 500):
        chunks = split_lines(str(path), n)
        assert chunks[0].start == 0 and chunks[-1].end == path.stat().st_size
        assert all(a.end == b.start for a, b in zip(chunks, chunks[1:]))
        got = [line for c in chunks for line in iter_chunk(c)]
        assert got == lines
        # first_line numbers the first line of each chunk
        for c in chunks:
            first = next(iter_chunk(c))
            assert first == lines[c.first_line - 1]


def test_split_lines_tiny_and_empty(tmp_path):
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    assert [list(iter_chunk(c)) for c in split_lines(str(empty), 4)] == [[]]
    one = tmp_path / "one"
    one.write_bytes(b"only\n")
    assert [line for c in split_lines(str(one), 4) for line in iter_chunk(c)] == [b"only\n"]


def test_split_log_never_cuts_a_request(sim_log):
    path, reqs, _ = sim_log
    layout = detect_log_layout(path)
    for n in (2, 5, 16):
        chunks = split_log(path, n, layout)
        ids = [{line.split(b"\t", 1)[0] for line in iter_chunk(c)} for c in chunks]
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                assert not a & b


def test_header_layout(tmp_path):
    order = ("query", "requestId", "url", "title", "bte", "rank", "clicks", "dwellTime")
    path = tmp_path / "h.tsv"
    path.write_bytes(("\t".join(order) + "\nq\tr\tu\t\t\t0\t0\t\n").encode())
    layout = detect_log_layout(str(path))
    assert layout.schema == order and layout.data_line == 2
    assert layout.data_start == len("\t".join(order)) + 1
    bare = tmp_path / "b.tsv"
    bare.write_bytes(b"r\tq\tu\t\t\t0\t0\t\n")
    assert detect_log_layout(str(bare)).schema == LOG_COLUMNS


def _run(fn, *args, **kw):
    buf = io.BytesIO()
    out = fn(*args[:1], buf, *args[1:], **kw)
    return buf.getvalue(), out


@pytest.mark.parametrize("threads", [1, 3])
def test_file_stages_match_in_memory(sim_log, tmp_path, threads):
    path, reqs, cfg = sim_log
    policy = CurationPolicy(rng_seed=3)
    expected = io.BytesIO()
    curated = list(curate_requests(reqs, policy))
    write_log(expected, curated)
    got, _ = _run(curate_file, path, policy, threads, tmp_dir=str(tmp_path))
    assert got == expected.getvalue()

    expected = io.BytesIO()
    pairs = list(aggregate(reqs))
    write_pairs(expected, pairs)
    got, _ = _run(aggregate_file, path, threads, mem_budget=50_000, tmp_dir=str(tmp_path))
    assert got == expected.getvalue()

    pair_path = tmp_path / "pairs.tsv"
    pair_path.write_bytes(got)
    for policy_text in ("const:20", "mean"):
        lcfg = LabelConfig(dwell_missing=DwellMissing.parse(policy_text), weight_mode="views")
        expected = io.BytesIO()
        write_labeled(expected, label_rows(pairs, lcfg.with_corpus_mean(pairs) if policy_text == "mean" else lcfg,
                                           "cdr"))
        got, _ = _run(label_file, str(pair_path), lcfg, "cdr", threads, tmp_dir=str(tmp_path))
        assert got == expected.getvalue()

    log_buf, truth_buf = io.BytesIO(), io.BytesIO()
    simulate_files(cfg, log_buf, truth_buf, threads, tmp_dir=str(tmp_path))
    expected_log, expected_truth = io.BytesIO(), io.BytesIO()
    for q in iter_simulation(cfg):
        write_log(expected_log, q.requests)
        write_test_set(expected_truth, q.truth)
    assert log_buf.getvalue() == expected_log.getvalue()
    assert truth_buf.getvalue() == expected_truth.getvalue()
    assert [p.name for p in tmp_path.iterdir()] == ["pairs.tsv"]


def test_default_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert default_threads() == 1
    monkeypatch.setenv(THREADS_ENV, "6")
    assert default_threads() == 6
    for bad in ("0", "two"):
        monkeypatch.setenv(THREADS_ENV, bad)
        with pytest.raises(ValueError):
            default_threads()
