"""Temperature-scaled in-batch contrastive loss over cosine similarities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import NonFinite, ShapeMismatch, ZeroVector


@dataclass
class Temperature:
    """Learnable temperature stored as ``log(tau)`` so it stays positive."""

    log_tau: float = math.log(0.07)

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        if not tau > 0:
            raise ValueError("temperature must be positive")
        return cls(math.log(tau))


class ContrastiveResult(NamedTuple):
    loss: float
    grad_q: np.ndarray
    grad_d: np.ndarray
    grad_tau: float
    grad_log_tau: float
    sims: np.ndarray


def _unit_rows(x: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector(f"{name} contains a zero vector")
    return x / norms[:, None], norms


def contrastive_loss(q_embs, d_embs, tau: float) -> ContrastiveResult:
    """Mean over queries of ``-log softmax(sim(q_i, .) / tau)[i]``.

    ``d_embs`` may hold more rows than ``q_embs``: row ``i`` of the queries
    is paired with row ``i`` of the documents and every other document row
    (including extra ones, e.g. soft negatives) acts as a negative.
    """
    q = np.asarray(q_embs, dtype=np.float64)
    d = np.asarray(d_embs, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1] or d.shape[0] < q.shape[0] or q.shape[0] < 1:
        raise ShapeMismatch(f"need q (N, k) and d (M>=N, k); got {q.shape} and {d.shape}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(d)) and math.isfinite(tau) and tau > 0):
        raise NonFinite("embeddings and temperature must be finite (tau > 0)")
    n = q.shape[0]
    qh, qn = _unit_rows(q, "q_embs")
    dh, dn = _unit_rows(d, "d_embs")
    sims = qh @ dh.T
    logits = sims / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    idx = np.arange(n)
    row_loss = np.log(denom) - shifted[idx, idx]
    loss = float(row_loss.mean())
    if not math.isfinite(loss):
        raise NonFinite("contrastive loss is not finite")

    dlogits = expd / denom[:, None]
    dlogits[idx, idx] -= 1.0
    dlogits /= n
    dsims = dlogits / tau
    grad_tau = float(-(dlogits * sims).sum() / (tau * tau))

    grad_q = (dsims @ dh - (dsims * sims).sum(axis=1)[:, None] * qh) / qn[:, None]
    grad_d = (dsims.T @ qh - (dsims * sims).sum(axis=0)[:, None] * dh) / dn[:, None]
    return ContrastiveResult(loss, grad_q, grad_d, grad_tau, grad_tau * tau, sims)
