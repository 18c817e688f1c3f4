"""Per (query, url) summation of clicks, dwell times and ranks.

The in-memory map spills to hash-partitioned shard files once its estimated
size passes ``mem_budget`` bytes; shards are then reduced one at a time and
k-way merged, so output is always sorted by (query, url).
"""

from __future__ import annotations

import heapq
import os
import shutil
import tempfile
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

from .errors import CapacityExceeded, FieldParse, MalformedLine
from .records import Request, _check_field, iter_lines

PAIR_COLUMNS = (
    "query", "url", "title", "bte", "views", "clicks_total", "nonlast_clicks", "last_clicks",
    "dwell_total", "dwell_known", "rank_sum", "rank_known",
)

# per-entry overhead of the accumulator dict, estimated for CPython
_ENTRY_OVERHEAD = 400


@dataclass(frozen=True, slots=True)
class AggregatedPair:
    query: str
    url: str
    title: str
    bte: str
    views: int
    clicks_total: int
    nonlast_clicks: int
    last_clicks: int
    dwell_total: int
    dwell_known: int
    rank_sum: int
    rank_known: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.query, self.url)


def designate_last_click(request: Request) -> list[bool]:
    """Flag the impression holding the request's final click.

    Dwell time is normally missing for the last click, so a clicked
    impression without dwell is preferred; among several candidates the one
    with the greatest rank wins (rank-less ones rank below everything, later
    input position breaks remaining ties).
    """
    flags = [False] * len(request.impressions)
    clicked = [i for i, imp in enumerate(request.impressions) if imp.clicks > 0]
    if not clicked:
        return flags
    no_dwell = [i for i in clicked if request.impressions[i].dwell_time is None]
    candidates = no_dwell or clicked

    def order(i: int) -> tuple[int, int]:
        r = request.impressions[i].rank
        return (-1 if r is None else r, i)

    flags[max(candidates, key=order)] = True
    return flags


def _shard_of(query: str, url: str, n_shards: int) -> int:
    return zlib.crc32(f"{query}\t{url}".encode("utf-8")) % n_shards


def _combine(dst: list, src: Sequence) -> None:
    """Fold ``src`` (newer) into ``dst``; both are [title, bte, *8 counters]."""
    dst[0] = src[0]
    dst[1] = src[1]
    for k in range(2, 10):
        dst[k] += src[k]


class Aggregator:
    def __init__(
        self,
        mem_budget: int | None = None,
        *,
        spill: bool = True,
        n_shards: int = 16,
        tmp_dir: str | None = None,
    ):
        self.mem_budget = mem_budget
        self.spill = spill
        self.n_shards = n_shards
        self.tmp_dir = tmp_dir
        self._acc: dict[tuple[str, str], list] = {}
        self._bytes = 0
        self._spill_dir: str | None = None
        self._shards: list[BinaryIO] = []
        self.spilled = False

    def add(self, request: Request) -> None:
        acc = self._acc
        flags = designate_last_click(request)
        q = request.query
        for imp, last in zip(request.impressions, flags):
            key = (q, imp.url)
            entry = acc.get(key)
            if entry is None:
                entry = acc[key] = [imp.title, imp.bte, 0, 0, 0, 0, 0, 0, 0, 0]
                self._bytes += _ENTRY_OVERHEAD + len(q) + len(imp.url) + len(imp.title) + len(imp.bte)
            else:
                entry[0] = imp.title
                entry[1] = imp.bte
            c = imp.clicks
            entry[2] += 1
            entry[3] += c
            if last:
                entry[4] += c - 1
                entry[5] += 1
            else:
                entry[4] += c
            if imp.dwell_time is not None:
                entry[6] += imp.dwell_time
                entry[7] += 1
            if imp.rank is not None:
                entry[8] += imp.rank
                entry[9] += 1
        if self.mem_budget is not None and self._bytes > self.mem_budget:
            if not self.spill:
                raise CapacityExceeded(
                    f"aggregation map reached ~{self._bytes} bytes, over the {self.mem_budget}-byte budget"
                )
            self._flush()

    def add_all(self, requests: Iterable[Request]) -> "Aggregator":
        for r in requests:
            self.add(r)
        return self

    def _flush(self) -> None:
        if self._spill_dir is None:
            self._spill_dir = tempfile.mkdtemp(prefix="clickrel-agg-", dir=self.tmp_dir)
            self._shards = [
                open(os.path.join(self._spill_dir, f"shard{i:03d}.tsv"), "wb") for i in range(self.n_shards)
            ]
        self.spilled = True
        buffers: list[list[str]] = [[] for _ in range(self.n_shards)]
        for (q, u), e in self._acc.items():
            buffers[_shard_of(q, u, self.n_shards)].append(_format_entry(q, u, e))
        for f, lines in zip(self._shards, buffers):
            f.write("".join(lines).encode("utf-8"))
        self._acc = {}
        self._bytes = 0

    def results(self) -> Iterator[AggregatedPair]:
        """Sorted aggregated pairs; the aggregator is consumed."""
        if not self.spilled:
            acc, self._acc = self._acc, {}
            for key in sorted(acc):
                yield _to_pair(key, acc[key])
            return
        self._flush()
        for f in self._shards:
            f.close()
        sorted_paths = []
        try:
            for i in range(self.n_shards):
                path = os.path.join(self._spill_dir, f"shard{i:03d}.tsv")
                acc: dict[tuple[str, str], list] = {}
                with open(path, "rb") as f:
                    for p in iter_pairs(f):
                        entry = _entry_of(p)
                        old = acc.get(p.key)
                        if old is None:
                            acc[p.key] = entry
                        else:
                            _combine(old, entry)
                os.remove(path)
                out = path + ".sorted"
                with open(out, "wb") as f:
                    f.write("".join(_format_entry(k[0], k[1], acc[k]) for k in sorted(acc)).encode("utf-8"))
                sorted_paths.append(out)
                del acc
            files = [open(p, "rb") for p in sorted_paths]
            try:
                yield from heapq.merge(*(iter_pairs(f) for f in files), key=lambda p: p.key)
            finally:
                for f in files:
                    f.close()
        finally:
            shutil.rmtree(self._spill_dir, ignore_errors=True)


def aggregate(
    requests: Iterable[Request], mem_budget: int | None = None, *, spill: bool = True, tmp_dir: str | None = None
) -> Iterator[AggregatedPair]:
    return Aggregator(mem_budget, spill=spill, tmp_dir=tmp_dir).add_all(requests).results()


def merge_pair(older: AggregatedPair, newer: AggregatedPair) -> AggregatedPair:
    if older.key != newer.key:
        raise ValueError(f"cannot merge {older.key} with {newer.key}")
    e = _entry_of(older)
    _combine(e, _entry_of(newer))
    return _to_pair(older.key, e)


def merge_sorted(streams: Sequence[Iterable[AggregatedPair]]) -> Iterator[AggregatedPair]:
    """Merge sorted per-shard aggregates; on equal keys later streams are newer."""
    def tag(i: int, s: Iterable[AggregatedPair]) -> Iterator[tuple]:
        for p in s:
            yield p.key, i, p

    iters = [tag(i, s) for i, s in enumerate(streams)]
    current: AggregatedPair | None = None
    for key, _, p in heapq.merge(*iters, key=lambda t: (t[0], t[1])):
        if current is not None and current.key == key:
            current = merge_pair(current, p)
        else:
            if current is not None:
                yield current
            current = p
    if current is not None:
        yield current


def _entry_of(p: AggregatedPair) -> list:
    return [p.title, p.bte, p.views, p.clicks_total, p.nonlast_clicks, p.last_clicks,
            p.dwell_total, p.dwell_known, p.rank_sum, p.rank_known]


def _to_pair(key: tuple[str, str], e: Sequence) -> AggregatedPair:
    return AggregatedPair(key[0], key[1], *e)


def _format_entry(q: str, u: str, e: Sequence) -> str:
    return "\t".join((q, u, e[0], e[1], *map(str, e[2:]))) + "\n"


def format_pair_line(p: AggregatedPair) -> str:
    for s in (p.query, p.url, p.title, p.bte):
        _check_field(s)
    return _format_entry(p.query, p.url, _entry_of(p))


def parse_pair_line(text: str, line_no: int | None = None) -> AggregatedPair:
    f = text.rstrip("\r\n").split("\t")
    if len(f) != len(PAIR_COLUMNS):
        raise MalformedLine(f"expected {len(PAIR_COLUMNS)} fields, got {len(f)}", line_no=line_no)
    try:
        nums = [int(x) for x in f[4:]]
    except ValueError:
        raise FieldParse("non-integer counter in aggregated pair", line_no=line_no) from None
    if min(nums) < 0:
        raise FieldParse("negative counter in aggregated pair", line_no=line_no)
    return AggregatedPair(f[0], f[1], f[2], f[3], *nums)


def iter_pairs(source: BinaryIO) -> Iterator[AggregatedPair]:
    first = True
    for line_no, text in iter_lines(source):
        if first:
            first = False
            if text.startswith("query\turl\t"):
                continue
        yield parse_pair_line(text, line_no)


def write_pairs(sink: BinaryIO, pairs: Iterable[AggregatedPair]) -> int:
    n = 0
    buf: list[str] = []
    for p in pairs:
        buf.append(format_pair_line(p))
        n += 1
        if len(buf) >= 4096:
            sink.write("".join(buf).encode("utf-8"))
            buf.clear()
    sink.write("".join(buf).encode("utf-8"))
    return n
