"""Command-line entry point: ``clickrel <subcommand> ...``.

Every subcommand reads and writes the TSV formats of :mod:`clickrel.records`
(``-`` means stdin/stdout), so stages compose with shell pipes. A JSON run
manifest is written next to the primary output file. Exit codes: 0 success,
2 usage error, 3 bad input data, 4 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import shutil
import statistics
import sys
import tempfile
import time
from collections import Counter
from contextlib import ExitStack
from typing import BinaryIO, Callable, Iterator, Sequence

import numpy as np

from . import __version__
from .aggregation import iter_pairs
from .curation import CurationPolicy
from .errors import DataError, FieldParse, MalformedLine
from .evaluation import (
    METRICS,
    correlation_report,
    exact_permutation_test,
    mc_permutation_test,
    oracle_baseline,
    per_query_metric,
    random_baseline,
    ranked_queries,
)
from .labeling import LABEL_FUNCTIONS, WEIGHT_MODES, DwellMissing, LabelConfig
from .pipeline import aggregate_file, curate_file, default_threads, label_file, simulate_files
from .records import (
    LOG_COLUMNS,
    AnnotatedPair,
    format_number,
    iter_lines,
    read_labeled,
    read_log,
    read_test_set,
    write_labeled,
)
from .sampling import Document, NegativePolicy, TrainingPair, build_batches, sample_soft_negatives
from .scoring import (
    CorpusStats,
    InteractionHead,
    bm25_score,
    doc_text,
    head_forward,
    load_head,
    read_embeddings,
    save_head,
    tokenize,
    train_toy_embedder,
    write_embeddings,
)
from .simulator import SimConfig, parse_config_text

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
QUERY_KEY, DOC_KEY = "q:", "d:"


class UsageError(Exception):
    pass


# --- streams, digests, manifest ---------------------------------------------


class HashingWriter:
    """Write-through wrapper that keeps a running SHA-256."""

    def __init__(self, sink: BinaryIO):
        self.sink = sink
        self.sha = hashlib.sha256()
        self.bytes = 0

    def write(self, data: bytes) -> int:
        self.sha.update(data)
        self.bytes += len(data)
        return self.sink.write(data)

    def flush(self) -> None:
        self.sink.flush()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Per-invocation bookkeeping: spooled inputs, hashed outputs, manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.stack = ExitStack()
        self.tmp = self.stack.enter_context(tempfile.TemporaryDirectory(prefix="clickrel-run-", dir=args.tmp_dir))
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, HashingWriter] = {}
        self._pending: list[tuple[str, str, BinaryIO]] = []
        self.summary: dict[str, object] = {}
        self.started = time.perf_counter()

    def input_path(self, path: str) -> str:
        """A seekable file for ``path``; stdin is spooled to a temporary file first."""
        if path == "-":
            if "-" in self.inputs:
                raise UsageError("stdin can be used for only one input")
            spooled = os.path.join(self.tmp, "stdin")
            with open(spooled, "wb") as f:
                shutil.copyfileobj(sys.stdin.buffer, f, 1 << 20)
            self.inputs["-"] = file_digest(spooled)
            return spooled
        if not os.path.isfile(path):
            raise UsageError(f"input file not found: {path}")
        self.inputs[path] = file_digest(path)
        return path

    def open_input(self, path: str) -> BinaryIO:
        return self.stack.enter_context(open(self.input_path(path), "rb"))

    def open_output(self, path: str) -> HashingWriter:
        """Files are written under a temporary name and renamed on success."""
        if path in self.outputs:
            raise UsageError(f"output {path} named twice")
        if path == "-":
            w = HashingWriter(sys.stdout.buffer)
        else:
            tmp = f"{path}.partial-{os.getpid()}"
            f = self.stack.enter_context(open(tmp, "wb"))
            self._pending.append((tmp, path, f))
            w = HashingWriter(f)
        self.outputs[path] = w
        return w

    def commit(self, primary: str | None) -> None:
        for tmp, path, f in self._pending:
            f.close()
            os.replace(tmp, path)
        self._pending.clear()
        if sys.stdout.buffer in (w.sink for w in self.outputs.values()):
            sys.stdout.buffer.flush()
        manifest_path = self.args.manifest
        if manifest_path is None and primary not in (None, "-"):
            manifest_path = f"{primary}.manifest.json"
        if manifest_path is not None:
            with open(manifest_path, "w", encoding="utf-8") as f:
                json.dump(self.manifest(), f, indent=2, sort_keys=True)
                f.write("\n")

    def manifest(self) -> dict:
        params = {k: v for k, v in vars(self.args).items() if k not in ("func", "manifest")}
        return {
            "tool": "clickrel",
            "version": __version__,
            "subcommand": self.args.command,
            "params": params,
            "seed": getattr(self.args, "seed", None),
            "inputs": dict(self.inputs),
            "outputs": {p: {"sha256": w.sha.hexdigest(), "bytes": w.bytes} for p, w in self.outputs.items()},
            "summary": self.summary,
            "wall_time_s": round(time.perf_counter() - self.started, 6),
        }

    def close(self) -> None:
        for tmp, _, f in self._pending:
            f.close()
            if os.path.exists(tmp):
                os.remove(tmp)
        self.stack.close()


# --- helpers -----------------------------------------------------------------


def _tsv_rows(source: BinaryIO, min_fields: int, what: str) -> Iterator[tuple[int, list[str]]]:
    for line_no, text in iter_lines(source):
        fields = text.split("\t")
        if len(fields) < min_fields:
            raise MalformedLine(f"{what}: expected at least {min_fields} fields, got {len(fields)}", line_no=line_no)
        yield line_no, fields


def _float_field(value: str, line_no: int, what: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise FieldParse(f"{what} {value!r} is not a number", line_no=line_no) from None
    if not math.isfinite(x):
        raise FieldParse(f"{what} {value!r} is not finite", line_no=line_no)
    return x


def _is_header(fields: Sequence[str]) -> bool:
    return len(fields) >= 2 and fields[0] == "query" and fields[1] == "url"


def read_scores(source: BinaryIO) -> dict[tuple[str, str], float]:
    scores: dict[tuple[str, str], float] = {}
    for line_no, f in _tsv_rows(source, 3, "score file"):
        if line_no == 1 and _is_header(f):
            continue
        scores[(f[0], f[1])] = _float_field(f[2], line_no, "score")
    return scores


def write_scores(sink: BinaryIO, rows: Iterator[tuple[str, str, float]]) -> int:
    n = 0
    for q, u, s in rows:
        sink.write(f"{q}\t{u}\t{s:.17g}\n".encode("utf-8"))
        n += 1
    return n


def read_per_query(source: BinaryIO) -> dict[str, float]:
    out: dict[str, float] = {}
    for line_no, f in _tsv_rows(source, 2, "per-query file"):
        if f[0] in out:
            raise DataError(f"query {f[0]!r} listed twice", line_no=line_no)
        out[f[0]] = _float_field(f[1], line_no, "value")
    return out


def read_query_url(source: BinaryIO) -> Iterator[tuple[str, str, str]]:
    """``(query, url, doc text)`` from a test-set (4 columns) or labeled (6 columns) file."""
    for line_no, f in _tsv_rows(source, 2, "pair file"):
        if line_no == 1 and _is_header(f):
            continue
        if len(f) == 4:
            yield f[0], f[1], f[2]
        elif len(f) == 6:
            yield f[0], f[1], doc_text(f[2], f[3])
        else:
            yield f[0], f[1], ""


def read_documents(source: BinaryIO) -> list[Document]:
    """Document pool: ``url title bte`` rows, or a labeled file (its documents are used)."""
    docs = []
    for line_no, f in _tsv_rows(source, 1, "document pool"):
        if len(f) == 3:
            docs.append(Document(f[0], f[1], f[2]))
        elif len(f) == 6:
            docs.append(Document(f[1], f[2], f[3]))
        else:
            raise MalformedLine(f"document pool: expected 3 or 6 fields, got {len(f)}", line_no=line_no)
    return docs


def _configured(factory: Callable, *a, **kw):
    """Build a config object; a rejected parameter is the caller's usage error."""
    try:
        return factory(*a, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _label_config(args: argparse.Namespace) -> LabelConfig:
    return _configured(
        lambda: LabelConfig(
            alpha=args.alpha,
            beta=args.beta,
            scale_s=args.s,
            rank_c=args.c,
            dwell_missing=DwellMissing.parse(args.dwell_missing),
            weight_mode=args.weights,
        )
    )


def _schema(args: argparse.Namespace) -> tuple[str, ...] | None:
    if not getattr(args, "schema", None):
        return None
    cols = tuple(c.strip() for c in args.schema.split(","))
    if sorted(cols) != sorted(LOG_COLUMNS):
        raise UsageError(f"--schema must be a permutation of {','.join(LOG_COLUMNS)}")
    return cols


# --- subcommands --------------------------------------------------------------


def cmd_curate(args, run: Run) -> str:
    policy = _configured(
        CurationPolicy,
        min_query_chars=args.min_chars,
        alpha_only=not args.allow_nonalpha,
        min_unique_requests=args.min_requests,
        max_unique_requests=args.max_requests,
        truncate_floor_rank=args.floor_rank,
        rng_seed=args.seed,
    )
    path = run.input_path(args.input)
    run.summary["rows"] = curate_file(path, run.open_output(args.output), policy, args.threads,
                                      _schema(args), args.tmp_dir)
    return args.output


def cmd_aggregate(args, run: Run) -> str:
    path = run.input_path(args.input)
    sink = run.open_output(args.output)
    if args.ungrouped:
        from .aggregation import aggregate, write_pairs
        with open(path, "rb") as f:
            pairs = aggregate(read_log(f, _schema(args), grouped=False), args.mem_budget,
                              spill=not args.no_spill, tmp_dir=args.tmp_dir)
            run.summary["pairs"] = write_pairs(sink, pairs)
    elif args.no_spill:
        from .aggregation import aggregate, write_pairs
        with open(path, "rb") as f:
            pairs = aggregate(read_log(f, _schema(args)), args.mem_budget, spill=False, tmp_dir=args.tmp_dir)
            run.summary["pairs"] = write_pairs(sink, pairs)
    else:
        run.summary["pairs"] = aggregate_file(path, sink, args.threads, args.mem_budget, _schema(args), args.tmp_dir)
    return args.output


def cmd_label(args, run: Run) -> str:
    cfg = _label_config(args)
    path = run.input_path(args.input)
    n, cfg = label_file(path, run.open_output(args.output), cfg, args.formula, args.threads, args.tmp_dir)
    run.summary["rows"] = n
    if cfg.dwell_mean is not None:
        run.summary["corpus_dwell_mean"] = cfg.dwell_mean
    return args.output


def cmd_negatives(args, run: Run) -> str:
    positives = list(read_labeled(run.open_input(args.pairs)))
    pool = read_documents(run.open_input(args.docpool))
    policy = _configured(NegativePolicy, args.k, args.seed, frozenset((r[0], r[1]) for r in positives))
    queries = [r[0] for r in positives]
    rows = ((p.query, p.doc.url, p.doc.title, p.doc.bte, p.label, p.weight)
            for p in sample_soft_negatives(queries, pool, policy))
    run.summary["rows"] = write_labeled(run.open_output(args.output), rows)
    return args.output


def cmd_simulate(args, run: Run) -> str:
    values: dict[str, str] = {}
    if args.config:
        with open(run.input_path(args.config), "r", encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    overrides = {"rng_seed": args.seed}
    if args.queries is not None:
        overrides["n_queries"] = args.queries
    cfg = _configured(SimConfig.from_mapping, values, **overrides)
    log_sink = run.open_output(args.out)
    truth_sink = run.open_output(args.truth) if args.truth else None
    run.summary["rows"] = simulate_files(cfg, log_sink, truth_sink, args.threads, args.tmp_dir)
    run.summary["config"] = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    return args.out


def cmd_score(args, run: Run) -> str:
    with run.open_input(args.head) as f:
        head = load_head(f)
    with run.open_input(args.embeddings) as f:
        emb = read_embeddings(f)

    def rows():
        for q, u, _ in read_query_url(run.open_input(args.pairs)):
            try:
                qv, dv = emb[QUERY_KEY + q], emb[DOC_KEY + u]
            except KeyError as exc:
                raise DataError(f"no embedding for key {exc.args[0]!r}") from None
            yield q, u, head_forward(qv, dv, head)

    run.summary["rows"] = write_scores(run.open_output(args.output), rows())
    return args.output


def cmd_bm25(args, run: Run) -> str:
    docs: dict[str, list[str]] = {}
    with run.open_input(args.corpus) as f:
        if args.corpus_format == "testset":
            for p in _iter_test_pairs_any(f):
                docs.setdefault(p.url, tokenize(p.doc_text))
        else:
            for _, fields in _tsv_rows(f, 2, "corpus"):
                docs.setdefault(fields[0], tokenize(" ".join(fields[1:])))
    stats = CorpusStats.from_documents(docs.values())

    def rows():
        for q, u, _ in read_query_url(run.open_input(args.pairs)):
            if u not in docs:
                raise DataError(f"document {u!r} is not in the corpus")
            yield q, u, bm25_score(tokenize(q), docs[u], stats, args.k1, args.b)

    run.summary["rows"] = write_scores(run.open_output(args.output), rows())
    run.summary["corpus_docs"] = stats.n_docs
    return args.output


def _iter_test_pairs_any(source: BinaryIO) -> Iterator[AnnotatedPair]:
    for _, pairs in read_test_set(source):
        yield from pairs


def _emit_json(run: Run, path: str, payload: dict) -> None:
    sink = run.open_output(path)
    sink.write((json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def cmd_eval(args, run: Run) -> str:
    groups = list(read_test_set(run.open_input(args.gold)))
    if not groups:
        raise DataError("gold test set is empty")
    payload: dict[str, object] = {"metric": args.metric, "queries": len(groups)}
    if args.baseline == "random":
        if args.metric != "ndcg10":
            raise UsageError("the random baseline is defined for ndcg10 only")
        payload["baseline"] = "random"
        payload["trials"] = args.trials
        payload["mean"] = random_baseline(ranked_queries(groups), args.trials, args.seed)
    elif args.baseline == "oracle":
        rqs = ranked_queries(groups)
        payload["baseline"] = "oracle"
        if args.metric == "ndcg10":
            payload["mean"] = oracle_baseline(rqs)
        else:
            payload["mean"] = float(np.mean(list(per_query_metric(rqs, args.metric).values())))
    else:
        if args.scores is None:
            raise UsageError("eval needs a scores file unless --baseline is given")
        scores = read_scores(run.open_input(args.scores))
        per = per_query_metric(ranked_queries(groups, scores), args.metric)
        payload["mean"] = float(np.mean(list(per.values())))
        if args.per_query:
            sink = run.open_output(args.per_query)
            for q, v in per.items():
                sink.write(f"{q}\t{v:.17g}\n".encode("utf-8"))
    _emit_json(run, args.out, payload)
    run.summary.update(payload)
    return args.out


def cmd_sigtest(args, run: Run) -> str:
    a = read_per_query(run.open_input(args.a))
    b = read_per_query(run.open_input(args.b))
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))[:5]
        raise DataError(f"per-query files cover different queries (e.g. {missing})")
    if not a:
        raise DataError("per-query files are empty")
    keys = sorted(a)
    xa = [a[k] for k in keys]
    xb = [b[k] for k in keys]
    payload: dict[str, object] = {"n": len(keys), "mean_a": float(np.mean(xa)), "mean_b": float(np.mean(xb))}
    if args.exact:
        payload["method"] = "exact"
        payload["p_value"] = exact_permutation_test(xa, xb, max_pairs=args.max_exact)
    else:
        payload["method"] = "monte-carlo"
        payload["samples"] = args.samples
        payload["p_value"] = mc_permutation_test(xa, xb, args.samples, args.seed, workers=args.threads)
    _emit_json(run, args.out, payload)
    run.summary.update(payload)
    return args.out


def cmd_correlate(args, run: Run) -> str:
    pairs = list(iter_pairs(run.open_input(args.pairs)))
    gold = {(p.query, p.url): p.label for p in _iter_test_pairs_any(run.open_input(args.gold))}
    rows = correlation_report(pairs, gold, _label_config(args))
    sink = run.open_output(args.out)
    sink.write(b"scheme\tspearman\n")
    for r in rows:
        value = "NA" if r.value is None else format_number(r.value)
        sink.write(f"{r.scheme}\t{value}\n".encode("utf-8"))
    run.summary["joined_pairs"] = sum(1 for p in pairs if p.key in gold)
    run.summary["correlations"] = {r.scheme: r.value for r in rows}
    return args.out


def log_statistics(requests, mem_budget: int | None = None) -> dict:
    """Shape statistics of a click log (before curation)."""
    from .aggregation import Aggregator

    rows = n_requests = clicks = clicked_imps = 0
    dwell: list[int] = []
    click_rank: Counter[int] = Counter()
    imp_rank: Counter[int] = Counter()
    urls_per_query: dict[str, set[str]] = {}
    requests_per_query: Counter[str] = Counter()
    agg = Aggregator(mem_budget)
    for req in requests:
        n_requests += 1
        requests_per_query[req.query] += 1
        seen = urls_per_query.setdefault(req.query, set())
        for imp in req.impressions:
            rows += 1
            seen.add(imp.url)
            if imp.rank is not None:
                imp_rank[imp.rank] += 1
            if imp.clicks:
                clicks += imp.clicks
                clicked_imps += 1
                if imp.rank is not None:
                    click_rank[imp.rank] += imp.clicks
            if imp.dwell_time is not None:
                dwell.append(imp.dwell_time)
        agg.add(req)
    n_pairs = clicked_pairs = 0
    for p in agg.results():
        n_pairs += 1
        clicked_pairs += p.clicks_total > 0
    docs_hist = Counter(len(s) for s in urls_per_query.values())
    max_rank = max(imp_rank) if imp_rank else -1
    return {
        "rows": rows,
        "requests": n_requests,
        "queries": len(urls_per_query),
        "clicks": clicks,
        "clicked_impressions": clicked_imps,
        "clicks_per_request": clicks / n_requests if n_requests else 0.0,
        "pairs": n_pairs,
        "clicked_pair_fraction": clicked_pairs / n_pairs if n_pairs else 0.0,
        "unclicked_pair_fraction": (n_pairs - clicked_pairs) / n_pairs if n_pairs else 0.0,
        "top3_click_fraction": sum(v for r, v in click_rank.items() if r < 3) / clicks if clicks else 0.0,
        "dwell_known": len(dwell),
        "dwell_mean": statistics.fmean(dwell) if dwell else None,
        "dwell_median": statistics.median(dwell) if dwell else None,
        "click_rank_histogram": [click_rank.get(r, 0) for r in range(max_rank + 1)],
        "impression_rank_histogram": [imp_rank.get(r, 0) for r in range(max_rank + 1)],
        "docs_per_query_histogram": {str(k): v for k, v in sorted(docs_hist.items())},
        "docs_per_query_mode": min(docs_hist, key=lambda k: (-docs_hist[k], k)) if docs_hist else None,
        "requests_per_query_histogram": {
            str(k): v for k, v in sorted(Counter(requests_per_query.values()).items())
        },
    }


def cmd_stats(args, run: Run) -> str:
    with run.open_input(args.input) as f:
        payload = log_statistics(read_log(f, _schema(args), grouped=not args.ungrouped), args.mem_budget)
    _emit_json(run, args.out, payload)
    run.summary.update({k: payload[k] for k in ("rows", "requests", "queries")})
    return args.out


def cmd_train_toy(args, run: Run) -> str:
    pairs = [
        TrainingPair(q, Document(u, t, b), label, weight)
        for q, u, t, b, label, weight in read_labeled(run.open_input(args.train))
    ]
    if not pairs:
        raise DataError("training file is empty")
    batches = list(build_batches(pairs, args.batch_size, args.seed))
    model = train_toy_embedder(
        batches, args.epochs, args.lr, args.seed,
        dim=args.dim, n_buckets=args.buckets, tau=args.tau, learn_tau=not args.fixed_tau,
        pointwise_weight=args.pointwise_weight, activation=args.activation,
    )
    items: dict[str, np.ndarray] = {}
    for q, u, text in read_query_url(run.open_input(args.embed)):
        items.setdefault(QUERY_KEY + q, model.embedder.embed(q))
        items.setdefault(DOC_KEY + u, model.embedder.embed(text))
    run.summary["embedded_keys"] = write_embeddings(run.open_output(args.output), items.items(), model.embedder.dim)
    if args.head_out:
        head = model.head
        if head is None:
            # no pointwise term was trained: score by cosine similarity alone
            head = InteractionHead.zeros(model.embedder.dim, args.activation)
            head.w_out[-1] = 1.0
        save_head(run.open_output(args.head_out), head)
    run.summary["loss_trace"] = model.loss_trace
    run.summary["tau"] = model.temperature.tau
    return args.output


# --- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        _report({"type": "UsageError", "category": "usage", "message": message}, EXIT_USAGE)
        sys.exit(EXIT_USAGE)


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be >= 1")
    return n


def _label_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=1.0, help="weight of non-last clicks (default 1)")
    p.add_argument("--beta", type=float, default=0.5, help="weight of last clicks (default 0.5)")
    p.add_argument("--s", type=float, default=1 / 20, help="log scale (default 1/20)")
    p.add_argument("--c", type=float, default=100.0, help="rank smoothing constant (default 100)")
    p.add_argument("--dwell-missing", default="const:20", help="zero | mean | const:V (default const:20)")
    p.add_argument("--weights", choices=WEIGHT_MODES, default="none")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker processes (default: $CLICKREL_THREADS or 1)")
    common.add_argument("--manifest", default=None,
                        help="manifest path (default: <output>.manifest.json; none for stdout)")
    common.add_argument("--tmp-dir", default=None, help="directory for spill and chunk files")

    schema = argparse.ArgumentParser(add_help=False)
    schema.add_argument("--schema", default=None,
                        help="comma-separated log column order when the file has no header")

    parser = _Parser(prog="clickrel", description="Click-log relevance labeling toolkit.")
    parser.add_argument("--version", action="version", version=f"clickrel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("curate", parents=[common, schema], help="eligibility, truncation, frequency bounds")
    p.add_argument("--min-chars", type=int, default=10)
    p.add_argument("--min-requests", type=int, default=5)
    p.add_argument("--max-requests", type=int, default=15)
    p.add_argument("--floor-rank", type=int, default=4)
    p.add_argument("--allow-nonalpha", action="store_true", help="skip the letters-and-spaces rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("aggregate", parents=[common, schema], help="sum behaviour per (query, url)")
    p.add_argument("--mem-budget", type=_positive_int, default=None, help="spill threshold in bytes")
    p.add_argument("--no-spill", action="store_true", help="fail instead of spilling past the budget")
    p.add_argument("--ungrouped", action="store_true", help="input rows of a request are not contiguous")
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("label", parents=[common], help="pseudo-labels and loss weights")
    p.add_argument("--formula", choices=sorted(LABEL_FUNCTIONS), default="cdr")
    _label_flags(p)
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("negatives", parents=[common], help="soft negative pairs")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("pairs")
    p.add_argument("docpool")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_negatives)

    p = sub.add_parser("simulate", parents=[common], help="synthetic click log with hidden relevance")
    p.add_argument("--queries", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.add_argument("--truth", default=None, help="write hidden relevance in test-set format")
    p.add_argument("--config", default=None, help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", parents=[common], help="score pairs with an interaction head")
    p.add_argument("--head", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("pairs")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("baseline-bm25", parents=[common], help="Okapi BM25 scores")
    p.add_argument("--corpus-format", choices=("docs", "testset"), default="docs",
                   help="docs: url<TAB>text...; testset: query url doc label")
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("corpus")
    p.add_argument("pairs")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_bm25)

    p = sub.add_parser("eval", parents=[common], help="mean NDCG@10 or P@10 against a gold test set")
    p.add_argument("--metric", choices=sorted(METRICS), default="ndcg10")
    p.add_argument("--baseline", choices=("random", "oracle"), default=None)
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-query", default=None, help="write query<TAB>value rows for sigtest")
    p.add_argument("--out", default="-")
    p.add_argument("gold")
    p.add_argument("scores", nargs="?", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sigtest", parents=[common], help="paired sign-flip permutation test")
    p.add_argument("--samples", type=_positive_int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact", action="store_true", help="enumerate all sign flips (small n only)")
    p.add_argument("--max-exact", type=_positive_int, default=20)
    p.add_argument("--out", default="-")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_sigtest)

    p = sub.add_parser("correlate", parents=[common], help="Spearman of each label scheme against gold")
    _label_flags(p)
    p.add_argument("--out", default="-")
    p.add_argument("pairs")
    p.add_argument("gold")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("stats", parents=[common, schema], help="shape statistics of a click log")
    p.add_argument("--mem-budget", type=_positive_int, default=None)
    p.add_argument("--ungrouped", action="store_true")
    p.add_argument("--out", default="-")
    p.add_argument("input", nargs="?", default="-")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-toy", parents=[common], help="train the hashed toy embedder")
    p.add_argument("--epochs", type=_positive_int, default=5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--buckets", type=_positive_int, default=4096)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--fixed-tau", action="store_true")
    p.add_argument("--pointwise-weight", type=float, default=0.0)
    p.add_argument("--activation", choices=("gelu", "tanh"), default="gelu")
    p.add_argument("--head-out", default=None)
    p.add_argument("train", help="labeled training rows")
    p.add_argument("embed", help="pairs to embed (test-set or labeled format)")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(func=cmd_train_toy)
    return parser


# --- dispatch -----------------------------------------------------------------


def _report(error: dict, code: int) -> None:
    sys.stderr.write(json.dumps({"error": error, "exit_code": code}, sort_keys=True) + "\n")
    sys.stderr.flush()


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is None:
            args.threads = default_threads()
    except ValueError as exc:
        _report({"type": "UsageError", "category": "usage", "message": str(exc)}, EXIT_USAGE)
        return EXIT_USAGE
    run = None
    try:
        run = Run(args)
        primary = args.func(args, run)
        run.commit(primary)
        return EXIT_OK
    except UsageError as exc:
        _report({"type": "UsageError", "category": "usage", "message": str(exc)}, EXIT_USAGE)
        return EXIT_USAGE
    except DataError as exc:
        err = {"type": type(exc).__name__, "category": "data", "message": exc.message}
        if exc.line_no is not None:
            err["line"] = exc.line_no
        if exc.source is not None:
            err["source"] = exc.source
        _report(err, EXIT_DATA)
        return EXIT_DATA
    except BrokenPipeError:
        # downstream closed the pipe; nothing useful left to report
        sys.stderr.close()
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code 4
        _report({"type": "InternalError", "category": "internal",
                 "message": f"{type(exc).__name__}: {exc}"}, EXIT_INTERNAL)
        return EXIT_INTERNAL
    finally:
        if run is not None:
            run.close()


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
