"""Soft negative sampling and training batch assembly."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

from .errors import PoolExhausted
from .seeding import rng_for


class Document(NamedTuple):
    url: str
    title: str = ""
    bte: str = ""


class TrainingPair(NamedTuple):
    query: str
    doc: Document
    label: float
    weight: float


@dataclass(frozen=True)
class NegativePolicy:
    negatives_per_query: int = 1
    rng_seed: int = 0
    exclusion: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.negatives_per_query < 0:
            raise ValueError("negatives_per_query must be >= 0")


def _dedupe(pool: Iterable[Document]) -> list[Document]:
    seen: set[str] = set()
    out = []
    for d in pool:
        if d.url not in seen:
            seen.add(d.url)
            out.append(d)
    return out


def sample_soft_negatives(
    queries: Iterable[str], doc_pool: Sequence[Document], policy: NegativePolicy
) -> Iterator[TrainingPair]:
    """``k`` random pool documents per query, never one observed with that query.

    Each query draws from its own generator keyed by (seed, query), so the
    result for a query does not depend on which other queries are present.
    """
    k = policy.negatives_per_query
    if k == 0:
        return
    pool = _dedupe(doc_pool)
    n = len(pool)
    observed: dict[str, set[str]] = {}
    for q, u in policy.exclusion:
        observed.setdefault(q, set()).add(u)
    pool_urls = {d.url for d in pool}

    for query in dict.fromkeys(queries):
        excluded = observed.get(query, set()) & pool_urls
        eligible = n - len(excluded)
        if eligible < k:
            raise PoolExhausted(f"query {query!r}: only {eligible} eligible documents for {k} negatives")
        rng = rng_for(policy.rng_seed, "soft-negatives", query)
        if eligible * 2 >= n:
            chosen: list[int] = []
            taken: set[int] = set()
            while len(chosen) < k:
                i = int(rng.integers(n))
                if i in taken or pool[i].url in excluded:
                    continue
                taken.add(i)
                chosen.append(i)
        else:
            candidates = [i for i, d in enumerate(pool) if d.url not in excluded]
            chosen = [candidates[j] for j in rng.choice(len(candidates), size=k, replace=False)]
        for i in chosen:
            yield TrainingPair(query, pool[i], 0.0, 1.0)


def build_batches(pairs: Iterable[TrainingPair], batch_size: int, rng_seed: int) -> Iterator[list[TrainingPair]]:
    """Seeded shuffle into batches whose queries are pairwise distinct.

    A pair whose query is already in the batch being filled is deferred to
    the front of the queue for the next batch, so every pair is emitted
    exactly once. Trailing batches may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = list(pairs)
    order = rng_for(rng_seed, "batches").permutation(len(items))
    queue = deque(items[i] for i in order)
    while queue:
        batch: list[TrainingPair] = []
        seen: set[str] = set()
        skipped: list[TrainingPair] = []
        while queue and len(batch) < batch_size:
            item = queue.popleft()
            if item.query in seen:
                skipped.append(item)
            else:
                seen.add(item.query)
                batch.append(item)
        queue.extendleft(reversed(skipped))
        yield batch
