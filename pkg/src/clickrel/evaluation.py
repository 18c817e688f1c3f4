"""Ranking metrics, rank correlation, baselines and paired significance tests."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .aggregation import AggregatedPair
from .errors import DataError, DegenerateInput
from .labeling import (
    DwellMissing,
    LabelConfig,
    click_dwell_rank_label,
    click_label,
    corpus_dwell_mean,
    dwell_label,
    rank_label,
    resolve_dwell,
    weighted_clicks,
)
from .records import AnnotatedPair
from .seeding import rng_for

RELEVANCE_THRESHOLD = 0.5


class RankedItem(NamedTuple):
    url: str
    gold: float
    score: float


@dataclass(frozen=True)
class RankedQuery:
    query: str
    items: tuple[RankedItem, ...]

    def __post_init__(self):
        if not self.items:
            raise DataError(f"query {self.query!r} has no items")
        for it in self.items:
            if not 0.0 <= it.gold <= 1.0:
                raise DataError(f"query {self.query!r}: gold label {it.gold!r} outside [0, 1]")


def _gains_in_score_order(rq: RankedQuery) -> list[int]:
    ordered = sorted(rq.items, key=lambda it: (-it.score, it.url))
    return [1 if it.gold > RELEVANCE_THRESHOLD else 0 for it in ordered]


def _dcg(gains: Sequence[int], k: int) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains[:k]))


def ndcg_at_k(rq: RankedQuery, k: int = 10) -> float:
    """Binary-gain NDCG (gold > 0.5 is relevant); 0 when nothing is relevant."""
    gains = _gains_in_score_order(rq)
    idcg = _dcg(sorted(gains, reverse=True), k)
    if idcg == 0.0:
        return 0.0
    return _dcg(gains, k) / idcg


def precision_at_k(rq: RankedQuery, k: int = 10, fixed_denominator: bool = True) -> float:
    gains = _gains_in_score_order(rq)[:k]
    return sum(gains) / (k if fixed_denominator else len(gains))


def ndcg_at_10(rq: RankedQuery) -> float:
    return ndcg_at_k(rq, 10)


def precision_at_10(rq: RankedQuery) -> float:
    return precision_at_k(rq, 10)


METRICS: dict[str, Callable[[RankedQuery], float]] = {"ndcg10": ndcg_at_10, "p10": precision_at_10}


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateInput(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DegenerateInput("need at least two observations")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    sxx = float(cx @ cx)
    syy = float(cy @ cy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("spearman correlation of a constant vector")
    r = float(cx @ cy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# --- significance ----------------------------------------------------------


def _paired_diffs(a: Sequence[float], b: Sequence[float]) -> np.ndarray:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise DataError(f"paired inputs must be equal-length non-empty vectors, got {x.shape} and {y.shape}")
    return x - y


def _tie_tolerance(d: np.ndarray) -> float:
    # sign-flipped sums of the same magnitudes can differ in the last bits
    return 1e-9 * float(np.abs(d).sum()) / d.size


def mc_permutation_test(
    per_query_a: Sequence[float],
    per_query_b: Sequence[float],
    samples: int,
    seed: int,
    *,
    chunk_size: int = 8192,
    workers: int = 1,
) -> float:
    """Two-sided paired sign-flip test on the mean difference.

    Samples are drawn in fixed-size chunks, each from a generator keyed by
    (seed, chunk index), so the p-value does not depend on ``workers``.
    Returns ``(1 + hits) / (samples + 1)``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    d = _paired_diffs(per_query_a, per_query_b)
    n = d.size
    threshold = abs(float(d.mean())) - _tie_tolerance(d)

    def count_chunk(c: int) -> int:
        size = min(chunk_size, samples - c * chunk_size)
        rng = rng_for(seed, "sign-flip", c)
        signs = rng.integers(0, 2, size=(size, n), dtype=np.int8) * 2 - 1
        means = signs @ d / n
        return int(np.count_nonzero(np.abs(means) >= threshold))

    n_chunks = -(-samples // chunk_size)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            hits = sum(ex.map(count_chunk, range(n_chunks)))
    else:
        hits = sum(count_chunk(c) for c in range(n_chunks))
    return (1 + hits) / (samples + 1)


def exact_permutation_test(per_query_a: Sequence[float], per_query_b: Sequence[float], max_pairs: int = 20) -> float:
    """Exact two-sided sign-flip p-value by enumerating all 2**n flips."""
    d = _paired_diffs(per_query_a, per_query_b)
    n = d.size
    if n > max_pairs:
        raise ValueError(f"exact enumeration over 2**{n} flips is too large (max_pairs={max_pairs})")
    threshold = abs(float(d.mean())) - _tie_tolerance(d)
    codes = np.arange(2 ** n, dtype=np.int64)[:, None]
    signs = ((codes >> np.arange(n)) & 1) * 2 - 1
    means = signs @ d / n
    return int(np.count_nonzero(np.abs(means) >= threshold)) / 2 ** n


# --- test-set evaluation ---------------------------------------------------


def ranked_queries(
    groups: Iterable[tuple[str, Sequence[AnnotatedPair]]],
    scores: Mapping[tuple[str, str], float] | None = None,
) -> list[RankedQuery]:
    """Join gold groups with model scores (gold labels themselves when ``scores`` is None)."""
    out = []
    for query, pairs in groups:
        items = []
        for p in pairs:
            if scores is None:
                s = p.label
            else:
                try:
                    s = scores[(p.query, p.url)]
                except KeyError:
                    raise DataError(f"no score for ({p.query!r}, {p.url!r})") from None
            items.append(RankedItem(p.url, p.label, float(s)))
        out.append(RankedQuery(query, tuple(items)))
    return out


def per_query_metric(rqs: Iterable[RankedQuery], metric: str = "ndcg10") -> dict[str, float]:
    fn = METRICS[metric]
    return {rq.query: fn(rq) for rq in rqs}


def mean_metric(rqs: Sequence[RankedQuery], metric: str = "ndcg10") -> float:
    fn = METRICS[metric]
    return float(np.mean([fn(rq) for rq in rqs])) if rqs else 0.0


def random_baseline(test_set: Sequence[RankedQuery], trials: int, seed: int) -> float:
    """Mean NDCG@10 when every item gets a uniform random score, averaged over trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    totals = []
    for t in range(trials):
        rng = rng_for(seed, "random-baseline", t)
        vals = []
        for rq in test_set:
            s = rng.random(len(rq.items))
            shuffled = RankedQuery(rq.query, tuple(it._replace(score=float(x)) for it, x in zip(rq.items, s)))
            vals.append(ndcg_at_10(shuffled))
        totals.append(np.mean(vals))
    return float(np.mean(totals))


def oracle_baseline(test_set: Sequence[RankedQuery]) -> float:
    """Mean NDCG@10 with the gold label as score; queries without relevant items count 0."""
    return mean_metric([RankedQuery(rq.query, tuple(it._replace(score=it.gold) for it in rq.items))
                        for rq in test_set])


# --- correlation report ----------------------------------------------------


class CorrelationRow(NamedTuple):
    scheme: str
    value: float | None
    error: str | None = None


def _combined_with_mean_dwell(cfg: LabelConfig) -> Callable[[AggregatedPair], float]:
    policy = DwellMissing("global_mean")

    def fn(p: AggregatedPair) -> float:
        d = resolve_dwell(p, policy, cfg.dwell_mean)
        signal = weighted_clicks(p, cfg) + p.views / (p.rank_sum + cfg.rank_c)
        return cfg.scale_s * math.log1p(signal * max(1.0, d))

    return fn


def label_schemes(cfg: LabelConfig) -> dict[str, Callable[[AggregatedPair], float]]:
    """Behaviour signals compared against gold relevance, weakest-expected first.

    ``cfg`` must carry the corpus dwell mean for the mean-substituted schemes.
    """
    zero = replace(cfg, dwell_missing=DwellMissing("zero"))
    mean = replace(cfg, dwell_missing=DwellMissing("global_mean"))
    return {
        "rank": lambda p: rank_label(p, cfg),
        "dwell_nan0": lambda p: dwell_label(p, zero),
        "clicks": lambda p: click_label(p, cfg),
        "dwell_nanmean": lambda p: dwell_label(p, mean),
        "dwell_nanmean_x_clicks_rank": _combined_with_mean_dwell(cfg),
        "cdr": lambda p: click_dwell_rank_label(p, cfg),
    }


def correlation_report(
    pairs: Iterable[AggregatedPair],
    gold: Mapping[tuple[str, str], float],
    cfg: LabelConfig = LabelConfig(),
    schemes: Sequence[str] | None = None,
) -> list[CorrelationRow]:
    pairs = list(pairs)
    joined = [p for p in pairs if p.key in gold]
    if not joined:
        raise DegenerateInput("no aggregated pair matches a gold label")
    if cfg.dwell_mean is None:
        cfg = replace(cfg, dwell_mean=corpus_dwell_mean(pairs))
    all_schemes = label_schemes(cfg)
    names = list(all_schemes) if schemes is None else list(schemes)
    ys = [gold[p.key] for p in joined]
    rows = []
    for name in names:
        fn = all_schemes[name]
        try:
            rows.append(CorrelationRow(name, spearman([fn(p) for p in joined], ys)))
        except DegenerateInput as exc:
            rows.append(CorrelationRow(name, None, str(exc)))
    return rows
