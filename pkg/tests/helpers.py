"""Shared fixtures: finite-difference gradients and a small simulator training corpus."""

from __future__ import annotations

import numpy as np

from clickrel.aggregation import aggregate
from clickrel.curation import CurationPolicy, curate_requests
from clickrel.evaluation import RankedItem, RankedQuery, mean_metric
from clickrel.labeling import LabelConfig, click_dwell_rank_label
from clickrel.sampling import Document, NegativePolicy, TrainingPair, build_batches, sample_soft_negatives
from clickrel.scoring import cosine_sim, doc_text
from clickrel.simulator import SimConfig, generate_log


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` (modified in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error, measured against the larger gradient's scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


class SimCorpus:
    def __init__(self, n_queries: int = 300, seed: int = 1, batch_size: int = 32):
        reqs, self.truth, _ = generate_log(SimConfig(n_queries=n_queries, rng_seed=seed))
        pairs = list(aggregate(curate_requests(reqs, CurationPolicy(rng_seed=seed))))
        cfg = LabelConfig()
        positives = [TrainingPair(p.query, Document(p.url, p.title, p.bte), click_dwell_rank_label(p, cfg), 1.0)
                     for p in pairs if p.clicks_total]
        pool = [Document(p.url, p.title, p.bte) for p in pairs]
        negatives = sample_soft_negatives(sorted({p.query for p in positives}), pool,
                                          NegativePolicy(1, seed, frozenset(p.key for p in pairs)))
        self.batches = list(build_batches(positives + list(negatives), batch_size, seed))
        self.texts = {(i.query, i.url): doc_text(i.title, i.bte) for r in reqs for i in r.impressions}

    def ndcg(self, embedder) -> float:
        by_query: dict[str, list] = {}
        for (q, u), g in self.truth.items():
            by_query.setdefault(q, []).append((u, g))
        rqs = [
            RankedQuery(q, tuple(RankedItem(u, g, cosine_sim(embedder.embed(q), embedder.embed(self.texts[(q, u)])))
                                 for u, g in items))
            for q, items in by_query.items()
        ]
        return mean_metric(rqs)
