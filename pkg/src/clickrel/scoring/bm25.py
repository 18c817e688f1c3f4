"""Okapi BM25 lexical baseline."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..errors import EmptyCorpus

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class CorpusStats:
    n_docs: int
    avg_doc_len: float
    doc_freq: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_documents(cls, docs: Iterable[Sequence[str]]) -> "CorpusStats":
        df: Counter[str] = Counter()
        n = 0
        total = 0
        for terms in docs:
            n += 1
            total += len(terms)
            df.update(set(terms))
        return cls(n, total / n if n else 0.0, dict(df))

    def idf(self, term: str) -> float:
        n = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_docs - n + 0.5) / (n + 0.5))


def bm25_score(
    query_terms: Sequence[str], doc_terms: Sequence[str], stats: CorpusStats, k1: float = 1.2, b: float = 0.75
) -> float:
    if stats.n_docs == 0 or stats.avg_doc_len <= 0:
        raise EmptyCorpus("BM25 needs a non-empty corpus")
    tf = Counter(doc_terms)
    norm = k1 * (1.0 - b + b * len(doc_terms) / stats.avg_doc_len)
    parts = []
    for term in query_terms:
        f = tf.get(term, 0)
        if f:
            parts.append(stats.idf(term) * f * (k1 + 1.0) / (f + norm))
    # fsum is exact, so the score does not depend on query-term order
    return math.fsum(parts)
