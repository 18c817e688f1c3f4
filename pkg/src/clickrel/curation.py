"""Dataset eligibility, anonymity bounds and request truncation."""

from __future__ import annotations

import heapq
import unicodedata
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator

from .errors import NoRankOnClicked
from .records import Request
from .seeding import stable_hash64


@dataclass(frozen=True)
class CurationPolicy:
    min_query_chars: int = 10
    alpha_only: bool = True
    min_unique_requests: int = 5
    max_unique_requests: int = 15
    truncate_floor_rank: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_unique_requests <= self.max_unique_requests:
            raise ValueError("need 0 < min_unique_requests <= max_unique_requests")
        if self.min_query_chars < 1:
            raise ValueError("min_query_chars must be >= 1")


def query_eligible(
    query: str, policy: CurationPolicy, extra_predicate: Callable[[str], bool] | None = None
) -> bool:
    # NFC so that decomposed diacritics (c + combining caron) count as one letter
    q = unicodedata.normalize("NFC", query)
    if len(q) < policy.min_query_chars:
        return False
    if policy.alpha_only and not all(c.isalpha() or c == " " for c in q):
        return False
    return extra_predicate is None or bool(extra_predicate(query))


def truncate_request(request: Request, policy: CurationPolicy) -> Request:
    """Keep results up to the last click or the floor rank, whichever is deeper."""
    cutoff = policy.truncate_floor_rank
    for imp in request.impressions:
        if imp.clicks > 0:
            if imp.rank is None:
                raise NoRankOnClicked(f"request {request.request_id!r}: clicked {imp.url!r} has no rank")
            cutoff = max(cutoff, imp.rank)
    kept = tuple(i for i in request.impressions if i.rank is None or i.rank <= cutoff)
    if len(kept) == len(request.impressions):
        return request
    return replace(request, impressions=kept)


def sampling_priority(seed: int, query: str, request_id: str) -> int:
    return stable_hash64(seed, query, request_id)


class RequestSelector:
    """Order-independent per-query sample of request ids.

    Each request gets a pseudo-random priority keyed by (seed, query,
    request id); a query keeps the ``max_unique_requests`` smallest
    priorities, which is a uniform sample without replacement that does not
    depend on input order or sharding. Memory is O(queries * cap).
    """

    def __init__(self, policy: CurationPolicy):
        self.policy = policy
        self.counts: dict[str, int] = {}
        # max-heaps (negated priorities) of the current bottom-k
        self.heaps: dict[str, list[tuple[int, str]]] = {}

    def add(self, query: str, request_id: str) -> None:
        cap = self.policy.max_unique_requests
        self.counts[query] = self.counts.get(query, 0) + 1
        item = (-sampling_priority(self.policy.rng_seed, query, request_id), request_id)
        heap = self.heaps.setdefault(query, [])
        if len(heap) < cap:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)

    def merge(self, other: "RequestSelector") -> "RequestSelector":
        for query, n in other.counts.items():
            self.counts[query] = self.counts.get(query, 0) + n
        for query, heap in other.heaps.items():
            for neg, rid in heap:
                mine = self.heaps.setdefault(query, [])
                if len(mine) < self.policy.max_unique_requests:
                    heapq.heappush(mine, (neg, rid))
                elif (neg, rid) > mine[0]:
                    heapq.heapreplace(mine, (neg, rid))
        return self

    def keep_sets(self) -> dict[str, frozenset[str]]:
        lo = self.policy.min_unique_requests
        return {
            q: frozenset(rid for _, rid in self.heaps[q])
            for q, n in self.counts.items()
            if n >= lo
        }


def select_requests(requests: Iterable[Request], policy: CurationPolicy) -> dict[str, frozenset[str]]:
    sel = RequestSelector(policy)
    for req in requests:
        sel.add(req.query, req.request_id)
    return sel.keep_sets()


def enforce_frequency_bounds(
    requests: Iterable[Request],
    policy: CurationPolicy,
    keep: dict[str, frozenset[str]] | None = None,
) -> Iterator[Request]:
    """Drop rare queries and cap frequent ones, preserving input order.

    ``keep`` is the result of :func:`select_requests` from an earlier pass
    over the same input; without it the stream is buffered in memory.
    """
    if keep is None:
        requests = list(requests)
        keep = select_requests(requests, policy)
    for req in requests:
        ids = keep.get(req.query)
        if ids is not None and req.request_id in ids:
            yield req


def curate_requests(
    requests: Iterable[Request],
    policy: CurationPolicy,
    keep: dict[str, frozenset[str]] | None = None,
    extra_predicate: Callable[[str], bool] | None = None,
) -> Iterator[Request]:
    """Eligibility filter, truncation, then frequency bounds.

    When ``keep`` is supplied it must have been computed over the eligible
    requests only (see :func:`eligible_requests`).
    """
    eligible = eligible_requests(requests, policy, extra_predicate)
    truncated = (truncate_request(r, policy) for r in eligible)
    return enforce_frequency_bounds(truncated, policy, keep)


def eligible_requests(
    requests: Iterable[Request],
    policy: CurationPolicy,
    extra_predicate: Callable[[str], bool] | None = None,
) -> Iterator[Request]:
    cache: dict[str, bool] = {}
    for req in requests:
        ok = cache.get(req.query)
        if ok is None:
            ok = cache[req.query] = query_eligible(req.query, policy, extra_predicate)
        if ok:
            yield req
