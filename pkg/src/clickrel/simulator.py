"""Synthetic click logs from a position-biased user model with known relevance.

Per query: documents get a hidden relevance, the "search engine" orders them
by relevance plus noise, and each request replays a top-down user: every
rank is examined with a page-aware probability (decaying within a page,
jumping back up at the top of the next page), examined documents are
clicked with a relevance-dependent probability, and a satisfying click ends
the session. Dwell times are lognormal with a relevance-dependent location;
the final click's dwell is usually missing, as in real logs.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Iterator, NamedTuple

import numpy as np

from .curation import CurationPolicy, curate_requests
from .aggregation import aggregate
from .evaluation import CorrelationRow, correlation_report
from .labeling import LabelConfig
from .records import BTE_MAX_CHARS, AnnotatedPair, ImpressionRecord, Request
from .seeding import rng_for

_SYLLABLES = ("ka", "po", "ře", "mi", "ní", "do", "vá", "lu", "če", "sto", "ry", "ba", "té", "zu", "chy", "še")
_TOPIC_VOCAB = 4000
_FILLER_VOCAB = 3000


@dataclass(frozen=True)
class SimConfig:
    n_queries: int = 10000
    requests_min: int = 5
    requests_max: int = 15
    docs_mode: int = 10
    docs_mode_prob: float = 0.5
    docs_min: int = 5
    docs_max: int = 30
    page_size: int = 10
    exam_decay: float = 0.8
    page_continue: float = 0.3
    relevance_mean: float = 0.3
    relevance_concentration: float = 3.0
    query_quality_spread: float = 0.12
    popularity_quality: float = 0.2
    engine_noise: float = 0.25
    request_noise: float = 0.2
    attractiveness_noise: float = 0.3
    click_floor: float = 0.03
    click_ceiling: float = 0.85
    satisfaction: float = 0.3
    repeat_click_prob: float = 0.05
    dwell_mu: float = 2.0
    dwell_mu_relevance: float = 3.5
    dwell_sigma: float = 0.9
    last_click_dwell_missing_prob: float = 1.0
    other_dwell_missing_prob: float = 0.0
    rank_absent_prob: float = 0.01
    deterministic_clicks: bool = False
    shuffle_truth: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.requests_min <= self.requests_max:
            raise ValueError("need 1 <= requests_min <= requests_max")
        if not 1 <= self.docs_min <= self.docs_mode <= self.docs_max:
            raise ValueError("need 1 <= docs_min <= docs_mode <= docs_max")
        for name in ("docs_mode_prob", "exam_decay", "page_continue", "click_floor", "click_ceiling",
                     "satisfaction", "repeat_click_prob", "last_click_dwell_missing_prob",
                     "other_dwell_missing_prob", "rank_absent_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.exam_decay <= 0 or self.page_continue <= 0:
            raise ValueError("examination probabilities must stay positive")

    def examination_curve(self, n: int) -> np.ndarray:
        r = np.arange(n)
        return self.page_continue ** (r // self.page_size) * self.exam_decay ** (r % self.page_size)

    @classmethod
    def from_mapping(cls, values: dict[str, str], **overrides) -> "SimConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown simulator setting {key!r}")
            t = types[key]
            if t in ("bool", bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif t in ("int", int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        kwargs.update(overrides)
        return cls(**kwargs)


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _word(index: int, min_syllables: int = 3) -> str:
    base = len(_SYLLABLES)
    parts = []
    while index or len(parts) < min_syllables:
        index, r = divmod(index, base)
        parts.append(_SYLLABLES[r])
    return "".join(parts)


def _topic_word(i: int) -> str:
    return _word(i, 3)


def _synonym(i: int) -> str:
    return _word(i + 7 * _TOPIC_VOCAB, 3)


def _filler_word(i: int) -> str:
    return _word(i + 20 * _TOPIC_VOCAB, 2)


class SimQuery(NamedTuple):
    index: int
    query: str
    requests: list[Request]
    truth: list[AnnotatedPair]


@dataclass
class SimStats:
    rows: int = 0
    requests: int = 0
    queries: int = 0
    clicks: int = 0
    clicked_impressions: int = 0
    dwell_values: list[int] = field(default_factory=list)
    click_rank_hist: Counter = field(default_factory=Counter)
    docs_per_query_hist: Counter = field(default_factory=Counter)

    def update(self, q: SimQuery) -> None:
        self.queries += 1
        self.requests += len(q.requests)
        self.docs_per_query_hist[len(q.truth)] += 1
        for req in q.requests:
            for imp in req.impressions:
                self.rows += 1
                if imp.clicks:
                    self.clicks += imp.clicks
                    self.clicked_impressions += 1
                    self.click_rank_hist[imp.rank] += imp.clicks
                if imp.dwell_time is not None:
                    self.dwell_values.append(imp.dwell_time)


def _doc_text(rng: np.random.Generator, topic: list[int], rel: float) -> tuple[str, str]:
    def words(n_filler: int, p_exact: float, p_syn: float) -> list[str]:
        out = [_filler_word(int(i)) for i in rng.integers(0, _FILLER_VOCAB, n_filler)]
        for t in topic:
            if rng.random() < p_exact:
                out.append(_topic_word(t))
            if rng.random() < p_syn:
                out.append(_synonym(t))
        rng.shuffle(out)
        return out

    title = " ".join(words(int(rng.integers(2, 5)), 0.15 + 0.35 * rel, 0.9 * rel)).capitalize()
    bte = " ".join(words(int(rng.integers(12, 30)), 0.1 + 0.3 * rel, 0.8 * rel))
    return title, bte[:BTE_MAX_CHARS].rstrip()


def simulate_query(cfg: SimConfig, qi: int) -> SimQuery:
    rng = rng_for(cfg.rng_seed, "sim-query", qi)
    n_topic = int(rng.integers(1, 3))
    topic = [int(t) for t in rng.integers(0, _TOPIC_VOCAB, n_topic)]
    query = " ".join([_word(qi, 4)] + [_topic_word(t) for t in topic])

    if rng.random() < cfg.docs_mode_prob:
        n_docs = cfg.docs_mode
    else:
        n_docs = int(rng.integers(cfg.docs_min, cfg.docs_max + 1))
    n_req = int(rng.integers(cfg.requests_min, cfg.requests_max + 1))

    # frequently issued queries tend to be better served by the engine
    popularity = (n_req - cfg.requests_min) / max(1, cfg.requests_max - cfg.requests_min) - 0.5
    quality = cfg.relevance_mean + cfg.query_quality_spread * rng.normal() + cfg.popularity_quality * popularity
    quality = min(0.95, max(0.05, quality))
    k = cfg.relevance_concentration
    rel = rng.beta(quality * k, (1.0 - quality) * k, n_docs)
    engine = rel + cfg.engine_noise * rng.normal(size=n_docs)
    served = engine + cfg.request_noise * rng.normal(size=(n_req, n_docs))
    order = np.argsort(-served, axis=1, kind="stable")  # order[j, r] = doc at rank r in request j
    rel_by_rank = rel[order]
    # snippet attractiveness drives clicks; true relevance drives satisfaction and dwell
    attract = np.clip(rel + cfg.attractiveness_noise * rng.normal(size=n_docs), 0.0, 1.0)
    attract_by_rank = attract[order]

    docs = []
    for di in range(n_docs):
        title, bte = _doc_text(rng, topic, float(rel[di]))
        docs.append((f"https://sim{qi % 97}.example.cz/{qi}/{di}", title, bte))

    exam_p = cfg.examination_curve(n_docs)
    if cfg.deterministic_clicks:
        examined = np.ones((n_req, n_docs), dtype=bool)
        clicked = rel_by_rank > 0.5
    else:
        examined = rng.random((n_req, n_docs)) < exam_p
        click_p = cfg.click_floor + (cfg.click_ceiling - cfg.click_floor) * attract_by_rank
        raw = examined & (rng.random((n_req, n_docs)) < click_p)
        satisfied = raw & (rng.random((n_req, n_docs)) < cfg.satisfaction * rel_by_rank)
        after_stop = (np.cumsum(satisfied, axis=1) - satisfied) > 0
        clicked = raw & ~after_stop
    repeat = rng.random((n_req, n_docs)) < cfg.repeat_click_prob
    dwell = np.rint(rng.lognormal(cfg.dwell_mu + cfg.dwell_mu_relevance * rel_by_rank, cfg.dwell_sigma,
                                  (n_req, n_docs))).astype(np.int64)
    drop_other = rng.random((n_req, n_docs)) < cfg.other_dwell_missing_prob
    drop_last = rng.random(n_req) < cfg.last_click_dwell_missing_prob
    hide_rank = rng.random((n_req, n_docs)) < cfg.rank_absent_prob

    requests = []
    for j in range(n_req):
        rid = f"s{cfg.rng_seed}q{qi}r{j}"
        row_clicks = clicked[j]
        last = int(np.flatnonzero(row_clicks)[-1]) if row_clicks.any() else -1
        ranked, unranked = [], []
        for r in range(n_docs):
            url, title, bte = docs[order[j, r]]
            if row_clicks[r]:
                c = 2 if repeat[j, r] else 1
                missing = drop_last[j] if r == last else drop_other[j, r]
                d = None if missing else int(dwell[j, r])
                ranked.append(ImpressionRecord(rid, query, url, title, bte, r, c, d))
            elif hide_rank[j, r]:
                unranked.append(ImpressionRecord(rid, query, url, title, bte, None, 0, None))
            else:
                ranked.append(ImpressionRecord(rid, query, url, title, bte, r, 0, None))
        requests.append(Request(rid, query, tuple(ranked + unranked)))

    truth_rel = rel
    if cfg.shuffle_truth:
        # global prior, not the query's quality: that also drives click rates
        m = cfg.relevance_mean
        truth_rel = rng_for(cfg.rng_seed, "shuffle-truth", qi).beta(m * k, (1.0 - m) * k, n_docs)
    truth = [
        AnnotatedPair(query, url, f"{title} {bte}"[:BTE_MAX_CHARS].strip(), float(truth_rel[di]))
        for di, (url, title, bte) in enumerate(docs)
    ]
    return SimQuery(qi, query, requests, truth)


def iter_simulation(cfg: SimConfig, start: int = 0, stop: int | None = None) -> Iterator[SimQuery]:
    stop = cfg.n_queries if stop is None else min(stop, cfg.n_queries)
    for qi in range(start, stop):
        yield simulate_query(cfg, qi)


def generate_log(cfg: SimConfig) -> tuple[list[Request], dict[tuple[str, str], float], SimStats]:
    """Materialize a whole synthetic log with its hidden truth and counters."""
    requests: list[Request] = []
    truth: dict[tuple[str, str], float] = {}
    stats = SimStats()
    for q in iter_simulation(cfg):
        requests.extend(q.requests)
        truth.update({(t.query, t.url): t.label for t in q.truth})
        stats.update(q)
    return requests, truth, stats


def fidelity_report(
    cfg: SimConfig,
    label_cfg: LabelConfig = LabelConfig(),
    policy: CurationPolicy | None = None,
) -> list[CorrelationRow]:
    """Run curate -> aggregate -> label on a synthetic log and correlate each label with the truth.

    Rows come back sorted by correlation, strongest first.
    """
    policy = policy or CurationPolicy(rng_seed=cfg.rng_seed)
    truth: dict[tuple[str, str], float] = {}

    def requests() -> Iterator[Request]:
        for q in iter_simulation(cfg):
            truth.update({(t.query, t.url): t.label for t in q.truth})
            yield from q.requests

    pairs = list(aggregate(curate_requests(requests(), policy)))
    rows = correlation_report(pairs, truth, label_cfg)
    return sorted(rows, key=lambda r: -math.inf if r.value is None else r.value, reverse=True)
