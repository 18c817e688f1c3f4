"""Click-log and test-set records, TSV parsing and serialization.

All readers take binary streams and decode strictly as UTF-8, so a bad byte
sequence is reported with its line number instead of being replaced.
"""

from __future__ import annotations

import re
import statistics
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

from .errors import (
    EncodingViolation,
    FieldParse,
    GroupingViolation,
    InvariantViolation,
    MalformedLine,
)

LOG_COLUMNS = ("requestId", "query", "url", "title", "bte", "rank", "clicks", "dwellTime")
LABELED_COLUMNS = ("query", "url", "title", "bte", "label", "weight")
TEST_SET_COLUMNS = ("query", "url", "doc", "label")

BTE_MAX_CHARS = 230
_ABSENT = ("", "N/A")
_INT_RE = re.compile(r"-?[0-9]+\Z")


@dataclass(frozen=True, slots=True)
class ImpressionRecord:
    request_id: str
    query: str
    url: str
    title: str
    bte: str
    rank: int | None
    clicks: int
    dwell_time: int | None

    def validate(self, line_no: int | None = None) -> "ImpressionRecord":
        if len(self.bte) > BTE_MAX_CHARS:
            raise InvariantViolation(f"bte has {len(self.bte)} characters (max {BTE_MAX_CHARS})", line_no=line_no)
        if self.rank is not None and self.rank < 0:
            raise InvariantViolation(f"negative rank {self.rank}", line_no=line_no)
        if self.clicks < 0:
            raise InvariantViolation(f"negative clicks {self.clicks}", line_no=line_no)
        if self.dwell_time is not None:
            if self.dwell_time < 0:
                raise InvariantViolation(f"negative dwell time {self.dwell_time}", line_no=line_no)
            if self.clicks < 1:
                raise InvariantViolation("dwell time present on an unclicked impression", line_no=line_no)
        return self


@dataclass(frozen=True, slots=True)
class Request:
    """One served result page: impressions ordered by rank, rank-less ones last."""

    request_id: str
    query: str
    impressions: tuple[ImpressionRecord, ...]

    @classmethod
    def from_impressions(cls, impressions: Sequence[ImpressionRecord]) -> "Request":
        if not impressions:
            raise ValueError("a request needs at least one impression")
        first = impressions[0]
        for imp in impressions:
            if imp.request_id != first.request_id or imp.query != first.query:
                raise InvariantViolation(
                    f"request {first.request_id!r} mixes queries or ids ({imp.request_id!r}, {imp.query!r})"
                )
        ranked = sorted((i for i in impressions if i.rank is not None), key=lambda i: i.rank)
        unranked = [i for i in impressions if i.rank is None]
        return cls(first.request_id, first.query, tuple(ranked + unranked))


@dataclass(frozen=True, slots=True)
class AnnotatedPair:
    query: str
    url: str
    doc_text: str
    label: float


def median_grade(grades: Sequence[float]) -> float:
    """Aggregate annotator grades the way the published test set does."""
    return float(statistics.median(grades))


# --- parsing ---------------------------------------------------------------


def _parse_int(value: str, column: str, line_no: int | None) -> int:
    if not _INT_RE.match(value):
        raise FieldParse(f"column {column!r}: {value!r} is not a base-10 integer", line_no=line_no)
    return int(value)


def _parse_opt_int(value: str, column: str, line_no: int | None) -> int | None:
    if value in _ABSENT:
        return None
    return _parse_int(value, column, line_no)


def _column_index(schema: Sequence[str], expected: Sequence[str]) -> tuple[int, ...]:
    if sorted(schema) != sorted(expected):
        raise ValueError(f"schema {list(schema)} must be a permutation of {list(expected)}")
    return tuple(schema.index(c) for c in expected)


def parse_log_line(
    line: str, schema: Sequence[str] = LOG_COLUMNS, line_no: int | None = None
) -> ImpressionRecord:
    idx = _column_index(schema, LOG_COLUMNS) if schema is not LOG_COLUMNS else None
    return _parse_log_fields(line.rstrip("\r\n").split("\t"), idx, line_no)


def _parse_log_fields(fields: list[str], idx: tuple[int, ...] | None, line_no: int | None) -> ImpressionRecord:
    if len(fields) != len(LOG_COLUMNS):
        raise MalformedLine(f"expected {len(LOG_COLUMNS)} tab-separated fields, got {len(fields)}", line_no=line_no)
    if idx is not None:
        fields = [fields[i] for i in idx]
    rid, query, url, title, bte, rank, clicks, dwell = fields
    # fast path: plain ASCII digits or absent values need no further checks
    if (
        clicks.isdigit() and clicks.isascii()
        and (rank in _ABSENT or (rank.isdigit() and rank.isascii()))
        and (dwell in _ABSENT or (dwell.isdigit() and dwell.isascii()))
        and len(bte) <= BTE_MAX_CHARS
    ):
        c = int(clicks)
        d = None if dwell in _ABSENT else int(dwell)
        if d is None or c >= 1:
            return ImpressionRecord(rid, query, url, title, bte, None if rank in _ABSENT else int(rank), c, d)
    rec = ImpressionRecord(
        rid,
        query,
        url,
        title,
        bte,
        _parse_opt_int(rank, "rank", line_no),
        _parse_int(clicks, "clicks", line_no),
        _parse_opt_int(dwell, "dwellTime", line_no),
    )
    return rec.validate(line_no)


def _check_field(value: str, line_no: int | None = None) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise InvariantViolation(f"field {value[:40]!r} contains a tab or newline", line_no=line_no)
    return value


def format_log_line(rec: ImpressionRecord, schema: Sequence[str] = LOG_COLUMNS) -> str:
    values = {
        "requestId": _check_field(rec.request_id),
        "query": _check_field(rec.query),
        "url": _check_field(rec.url),
        "title": _check_field(rec.title),
        "bte": _check_field(rec.bte),
        "rank": "" if rec.rank is None else str(rec.rank),
        "clicks": str(rec.clicks),
        "dwellTime": "" if rec.dwell_time is None else str(rec.dwell_time),
    }
    return "\t".join(values[c] for c in schema) + "\n"


def iter_lines(source: BinaryIO, start_line: int = 1) -> Iterator[tuple[int, str]]:
    """Yield ``(line_no, text)`` with the newline stripped; blank lines are skipped."""
    for line_no, raw in enumerate(source, start_line):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingViolation(f"invalid UTF-8 at byte {exc.start}", line_no=line_no) from None
        text = text.rstrip("\r\n")
        if text:
            yield line_no, text


def iter_log_records(
    source: BinaryIO, schema: Sequence[str] | None = None, start_line: int = 1
) -> Iterator[ImpressionRecord]:
    """Parse every row; a leading ``requestId`` header row fixes the column order."""
    idx: tuple[int, ...] | None = None
    if schema is not None and tuple(schema) != LOG_COLUMNS:
        idx = _column_index(schema, LOG_COLUMNS)
    first = True
    for line_no, text in iter_lines(source, start_line):
        fields = text.split("\t")
        if first:
            first = False
            if "requestId" in fields:
                if schema is None and tuple(fields) != LOG_COLUMNS:
                    idx = _column_index(fields, LOG_COLUMNS)
                continue
        yield _parse_log_fields(fields, idx, line_no)


def group_requests(
    records: Iterable[ImpressionRecord], *, grouped: bool = True, detect_regrouping: bool = True
) -> Iterator[Request]:
    """Assemble impressions into requests.

    With ``grouped=True`` rows of one request must be contiguous and only the
    current request is held in memory (plus, unless ``detect_regrouping`` is
    off, the set of closed ids used to report a :class:`GroupingViolation`).
    With ``grouped=False`` the whole input is buffered and requests come out
    in order of first appearance.
    """
    if not grouped:
        groups: dict[str, list[ImpressionRecord]] = {}
        for rec in records:
            groups.setdefault(rec.request_id, []).append(rec)
        for imps in groups.values():
            yield Request.from_impressions(imps)
        return

    closed: set[str] = set()
    current: list[ImpressionRecord] = []
    for rec in records:
        if current and rec.request_id != current[0].request_id:
            if detect_regrouping:
                closed.add(current[0].request_id)
            yield Request.from_impressions(current)
            current = []
        if not current and detect_regrouping and rec.request_id in closed:
            raise GroupingViolation(f"request {rec.request_id!r} reappears after its group closed")
        current.append(rec)
    if current:
        yield Request.from_impressions(current)


def read_log(
    source: BinaryIO,
    schema: Sequence[str] | None = None,
    *,
    grouped: bool = True,
    detect_regrouping: bool = True,
) -> Iterator[Request]:
    return group_requests(
        iter_log_records(source, schema), grouped=grouped, detect_regrouping=detect_regrouping
    )


def write_log(sink: BinaryIO, requests: Iterable[Request], schema: Sequence[str] = LOG_COLUMNS) -> int:
    n = 0
    for req in requests:
        sink.write("".join(format_log_line(i, schema) for i in req.impressions).encode("utf-8"))
        n += len(req.impressions)
    return n


# --- labeled output --------------------------------------------------------


class WriteFailed(OSError):
    def __init__(self, rows_written: int, cause: OSError):
        self.rows_written = rows_written
        super().__init__(f"write failed after {rows_written} rows: {cause}")


def format_number(x: float) -> str:
    return f"{x:.9g}"


def format_labeled_row(query: str, url: str, title: str, bte: str, label: float, weight: float) -> str:
    if not 0.0 <= label <= 1.0:
        raise InvariantViolation(f"label {label!r} outside [0, 1] for ({query!r}, {url!r})")
    if not weight > 0.0:
        raise InvariantViolation(f"loss weight {weight!r} not positive for ({query!r}, {url!r})")
    return "\t".join(
        (_check_field(query), _check_field(url), _check_field(title), _check_field(bte),
         format_number(label), format_number(weight))
    ) + "\n"


def write_labeled(sink: BinaryIO, rows: Iterable[tuple[str, str, str, str, float, float]]) -> int:
    count = 0
    try:
        for row in rows:
            sink.write(format_labeled_row(*row).encode("utf-8"))
            count += 1
    except OSError as exc:
        raise WriteFailed(count, exc) from exc
    return count


def read_labeled(source: BinaryIO) -> Iterator[tuple[str, str, str, str, float, float]]:
    for line_no, text in iter_lines(source):
        fields = text.split("\t")
        if len(fields) != len(LABELED_COLUMNS):
            raise MalformedLine(f"expected {len(LABELED_COLUMNS)} fields, got {len(fields)}", line_no=line_no)
        try:
            label, weight = float(fields[4]), float(fields[5])
        except ValueError:
            raise FieldParse(f"non-numeric label/weight {fields[4]!r}/{fields[5]!r}", line_no=line_no) from None
        yield fields[0], fields[1], fields[2], fields[3], label, weight


# --- annotated test set ----------------------------------------------------


def _parse_label(value: str, line_no: int | None) -> float:
    try:
        label = float(value)
    except ValueError:
        raise FieldParse(f"label {value!r} is not a number", line_no=line_no) from None
    if not 0.0 <= label <= 1.0:
        raise FieldParse(f"label {value!r} outside [0, 1]", line_no=line_no)
    return label


def iter_test_pairs(source: BinaryIO) -> Iterator[AnnotatedPair]:
    first = True
    for line_no, text in iter_lines(source):
        fields = text.split("\t")
        if first:
            first = False
            if tuple(fields) == TEST_SET_COLUMNS:
                continue
        if len(fields) != len(TEST_SET_COLUMNS):
            raise MalformedLine(f"expected {len(TEST_SET_COLUMNS)} fields, got {len(fields)}", line_no=line_no)
        query, url, doc, label = fields
        if len(doc) > BTE_MAX_CHARS:
            raise InvariantViolation(f"doc text has {len(doc)} characters (max {BTE_MAX_CHARS})", line_no=line_no)
        yield AnnotatedPair(query, url, doc, _parse_label(label, line_no))


def read_test_set(source: BinaryIO) -> Iterator[tuple[str, list[AnnotatedPair]]]:
    """Yield ``(query, pairs)`` groups; each query's rows must be contiguous."""
    seen: set[str] = set()
    current: list[AnnotatedPair] = []
    for pair in iter_test_pairs(source):
        if current and pair.query != current[0].query:
            seen.add(current[0].query)
            yield current[0].query, current
            current = []
        if not current and pair.query in seen:
            raise GroupingViolation(f"query {pair.query!r} is not contiguous in the test set")
        current.append(pair)
    if current:
        yield current[0].query, current


def write_test_set(sink: BinaryIO, pairs: Iterable[AnnotatedPair]) -> int:
    n = 0
    for p in pairs:
        if not 0.0 <= p.label <= 1.0:
            raise InvariantViolation(f"label {p.label!r} outside [0, 1]")
        sink.write(
            f"{_check_field(p.query)}\t{_check_field(p.url)}\t{_check_field(p.doc_text)}\t{format_number(p.label)}\n".encode("utf-8")
        )
        n += 1
    return n
