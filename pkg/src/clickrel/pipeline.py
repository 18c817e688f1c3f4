"""Chunked multi-process execution of the log-processing stages.

Inputs are split into byte ranges that never cut a request (or, for
line-oriented files, a line). Each range is processed by one worker and the
per-range outputs are concatenated or merged in range order, so the bytes
written never depend on the worker count.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import BinaryIO, Callable, Iterator, Sequence

from .aggregation import Aggregator, iter_pairs, merge_sorted, parse_pair_line, write_pairs
from .curation import CurationPolicy, RequestSelector, curate_requests, eligible_requests
from .labeling import LabelConfig, label_rows
from .records import (
    LOG_COLUMNS,
    group_requests,
    iter_lines,
    iter_log_records,
    write_labeled,
    write_log,
    write_test_set,
)
from .simulator import SimConfig, iter_simulation

THREADS_ENV = "CLICKREL_THREADS"
_BLOCK = 1 << 20


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@dataclass(frozen=True)
class Chunk:
    path: str
    start: int
    end: int
    first_line: int


@dataclass(frozen=True)
class LogLayout:
    """Column order and where the data rows start."""

    schema: tuple[str, ...]
    data_start: int
    data_line: int


def detect_log_layout(path: str, schema: Sequence[str] | None = None) -> LogLayout:
    with open(path, "rb") as f:
        first = f.readline()
    fields = first.rstrip(b"\r\n").decode("utf-8", errors="replace").split("\t")
    if "requestId" in fields:
        cols = tuple(schema) if schema is not None else tuple(fields)
        return LogLayout(cols, len(first), 2)
    return LogLayout(tuple(schema) if schema is not None else LOG_COLUMNS, 0, 1)


def _count_newlines(path: str, start: int, end: int) -> int:
    n = 0
    with open(path, "rb") as f:
        f.seek(start)
        remaining = end - start
        while remaining > 0:
            block = f.read(min(_BLOCK, remaining))
            if not block:
                break
            n += block.count(b"\n")
            remaining -= len(block)
    return n


def _number_cuts(path: str, offsets: list[int], first_line: int) -> list[tuple[int, int]]:
    """Attach the line number of each cut (offsets ascending, each at a line start)."""
    out = []
    line = first_line
    prev = offsets[0]
    for off in offsets:
        line += _count_newlines(path, prev, off)
        prev = off
        out.append((off, line))
    return out


def split_lines(path: str, n_chunks: int, start: int = 0, first_line: int = 1) -> list[Chunk]:
    """Cut ``path[start:]`` into up to ``n_chunks`` ranges at line boundaries."""
    size = os.path.getsize(path)
    n_chunks = max(1, n_chunks)
    offsets = [start]
    with open(path, "rb") as f:
        for i in range(1, n_chunks):
            t = start + (size - start) * i // n_chunks
            if t <= start:
                continue
            f.seek(t - 1)
            f.readline()
            if f.tell() < size:
                offsets.append(max(f.tell(), offsets[-1]))
    return _chunks(path, _number_cuts(path, sorted(set(offsets)), first_line), size)


def split_log(path: str, n_chunks: int, layout: LogLayout) -> list[Chunk]:
    """Like :func:`split_lines`, but each cut moves forward to the next request boundary."""
    rid_col = layout.schema.index("requestId")
    size = os.path.getsize(path)

    def rid_of(line: bytes) -> bytes:
        parts = line.rstrip(b"\r\n").split(b"\t")
        return parts[rid_col] if len(parts) > rid_col else line

    offsets = [layout.data_start]
    with open(path, "rb") as f:
        for ch in split_lines(path, n_chunks, layout.data_start)[1:]:
            pos = max(ch.start, offsets[-1])
            f.seek(pos)
            head = f.readline()
            if not head:
                break
            rid = rid_of(head)
            pos += len(head)
            while True:
                nxt = f.readline()
                if not nxt or rid_of(nxt) != rid:
                    break
                pos += len(nxt)
            offsets.append(pos)
    offsets = sorted(set(o for o in offsets if o < size)) or [layout.data_start]
    return _chunks(path, _number_cuts(path, offsets, layout.data_line), size)


def _chunks(path: str, cuts: list[tuple[int, int]], size: int) -> list[Chunk]:
    ends = [c[0] for c in cuts[1:]] + [size]
    return [Chunk(path, s, e, ln) for (s, ln), e in zip(cuts, ends)]


def iter_chunk(chunk: Chunk) -> Iterator[bytes]:
    """Raw lines (newline included) of a byte range."""
    with open(chunk.path, "rb") as f:
        f.seek(chunk.start)
        remaining = chunk.end - chunk.start
        while remaining > 0:
            line = f.readline(remaining)
            if not line:
                break
            remaining -= len(line)
            yield line


def chunk_requests(chunk: Chunk, schema: Sequence[str]):
    records = iter_log_records(iter_chunk(chunk), schema, start_line=chunk.first_line)
    return group_requests(records)


def run_chunks(fn: Callable, tasks: Sequence[tuple], threads: int) -> list:
    """Apply ``fn(*task)`` to every task, in processes when ``threads > 1``; results keep task order."""
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as ex:
        futures = [ex.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def concat_files(paths: Sequence[str], sink: BinaryIO) -> None:
    for p in paths:
        with open(p, "rb") as f:
            shutil.copyfileobj(f, sink, _BLOCK)


# --- stage workers (top level so they pickle) -------------------------------


def _curate_scan(chunk: Chunk, schema: tuple[str, ...], policy: CurationPolicy) -> RequestSelector:
    sel = RequestSelector(policy)
    for req in eligible_requests(chunk_requests(chunk, schema), policy):
        sel.add(req.query, req.request_id)
    return sel


def _curate_emit(chunk: Chunk, schema: tuple[str, ...], policy: CurationPolicy,
                 keep: dict[str, frozenset[str]], out: str) -> int:
    with open(out, "wb") as f:
        return write_log(f, curate_requests(chunk_requests(chunk, schema), policy, keep))


def _aggregate_chunk(chunk: Chunk, schema: tuple[str, ...], mem_budget: int | None, tmp_dir: str,
                     out: str) -> int:
    agg = Aggregator(mem_budget, tmp_dir=tmp_dir).add_all(chunk_requests(chunk, schema))
    with open(out, "wb") as f:
        return write_pairs(f, agg.results())


def chunk_pairs(chunk: Chunk):
    for line_no, text in iter_lines(iter_chunk(chunk), chunk.first_line):
        yield parse_pair_line(text, line_no)


def _dwell_sums(chunk: Chunk) -> tuple[int, int]:
    total = n = 0
    for p in chunk_pairs(chunk):
        if p.dwell_known > 0:
            total += p.dwell_total
            n += 1
    return total, n


def _label_chunk(chunk: Chunk, cfg: LabelConfig, formula: str, out: str) -> int:
    with open(out, "wb") as f:
        return write_labeled(f, label_rows(chunk_pairs(chunk), cfg, formula))


def _simulate_chunk(cfg: SimConfig, start: int, stop: int, log_out: str, truth_out: str | None) -> int:
    rows = 0
    tf = open(truth_out, "wb") if truth_out else None
    try:
        with open(log_out, "wb") as lf:
            for q in iter_simulation(cfg, start, stop):
                rows += write_log(lf, q.requests)
                if tf is not None:
                    write_test_set(tf, q.truth)
    finally:
        if tf is not None:
            tf.close()
    return rows


# --- stage drivers ----------------------------------------------------------


def _pairs_layout(path: str) -> tuple[int, int]:
    with open(path, "rb") as f:
        first = f.readline()
    if first.startswith(b"query\turl\t"):
        return len(first), 2
    return 0, 1


def curate_file(path: str, sink: BinaryIO, policy: CurationPolicy, threads: int,
                schema: Sequence[str] | None = None, tmp_dir: str | None = None) -> int:
    """Two passes: pick the kept request ids per query, then filter and truncate."""
    layout = detect_log_layout(path, schema)
    chunks = split_log(path, threads, layout)
    selectors = run_chunks(_curate_scan, [(c, layout.schema, policy) for c in chunks], threads)
    merged = selectors[0]
    for s in selectors[1:]:
        merged.merge(s)
    keep = merged.keep_sets()
    with tempfile.TemporaryDirectory(prefix="clickrel-curate-", dir=tmp_dir) as tmp:
        outs = [os.path.join(tmp, f"part{i:04d}") for i in range(len(chunks))]
        rows = run_chunks(_curate_emit, [(c, layout.schema, policy, keep, o) for c, o in zip(chunks, outs)], threads)
        concat_files(outs, sink)
    return sum(rows)


def aggregate_file(path: str, sink: BinaryIO, threads: int, mem_budget: int | None = None,
                   schema: Sequence[str] | None = None, tmp_dir: str | None = None) -> int:
    """Aggregate each request-aligned chunk, then merge the sorted partial results in chunk order."""
    layout = detect_log_layout(path, schema)
    chunks = split_log(path, threads, layout)
    budget = None if mem_budget is None else max(1, mem_budget // max(1, min(threads, len(chunks))))
    with tempfile.TemporaryDirectory(prefix="clickrel-agg-", dir=tmp_dir) as tmp:
        outs = [os.path.join(tmp, f"part{i:04d}") for i in range(len(chunks))]
        run_chunks(_aggregate_chunk, [(c, layout.schema, budget, tmp, o) for c, o in zip(chunks, outs)], threads)
        files = [open(o, "rb") for o in outs]
        try:
            return write_pairs(sink, merge_sorted([iter_pairs(f) for f in files]))
        finally:
            for f in files:
                f.close()


def label_file(path: str, sink: BinaryIO, cfg: LabelConfig, formula: str, threads: int,
               tmp_dir: str | None = None) -> tuple[int, LabelConfig]:
    """Label every aggregated pair; the corpus dwell mean is computed first when the policy needs it."""
    start, line = _pairs_layout(path)
    chunks = split_lines(path, threads, start, line)
    if cfg.dwell_missing.kind == "global_mean" and cfg.dwell_mean is None:
        sums = run_chunks(_dwell_sums, [(c,) for c in chunks], threads)
        total = sum(s for s, _ in sums)
        n = sum(k for _, k in sums)
        cfg = replace(cfg, dwell_mean=total / n if n else 0.0)
    with tempfile.TemporaryDirectory(prefix="clickrel-label-", dir=tmp_dir) as tmp:
        outs = [os.path.join(tmp, f"part{i:04d}") for i in range(len(chunks))]
        rows = run_chunks(_label_chunk, [(c, cfg, formula, o) for c, o in zip(chunks, outs)], threads)
        concat_files(outs, sink)
    return sum(rows), cfg


def simulate_files(cfg: SimConfig, log_sink: BinaryIO, truth_sink: BinaryIO | None, threads: int,
                   tmp_dir: str | None = None) -> int:
    n = cfg.n_queries
    parts = max(1, min(threads, n))
    bounds = [n * i // parts for i in range(parts + 1)]
    with tempfile.TemporaryDirectory(prefix="clickrel-sim-", dir=tmp_dir) as tmp:
        logs = [os.path.join(tmp, f"log{i:04d}") for i in range(parts)]
        truths = [os.path.join(tmp, f"truth{i:04d}") if truth_sink is not None else None for i in range(parts)]
        rows = run_chunks(
            _simulate_chunk,
            [(cfg, bounds[i], bounds[i + 1], logs[i], truths[i]) for i in range(parts)],
            threads,
        )
        concat_files(logs, log_sink)
        if truth_sink is not None:
            concat_files([t for t in truths if t], truth_sink)
    return sum(rows)
