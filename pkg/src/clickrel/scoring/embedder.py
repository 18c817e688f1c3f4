"""Hashed bag-of-tokens embedder trained with the in-batch contrastive loss.

A desk-scale stand-in for a pretrained encoder: each token hashes into a
row of a lookup table and a text embeds as the mean of its rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DivergenceDetected
from ..sampling import TrainingPair
from ..seeding import rng_for, stable_hash64
from .bm25 import tokenize
from .contrastive import Temperature, contrastive_loss
from .head import InteractionHead, head_forward, head_gradient

_EMPTY_TOKEN = "\x00empty"


def doc_text(title: str, bte: str) -> str:
    return f"{title} {bte}".strip()


class HashedEmbedder:
    def __init__(self, table: np.ndarray):
        self.table = table
        self._buckets: dict[str, int] = {}

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def random(cls, dim: int, n_buckets: int, seed: int) -> "HashedEmbedder":
        rng = rng_for(seed, "embedder-init")
        return cls(rng.normal(0.0, 1.0 / math.sqrt(dim), (n_buckets, dim)))

    def token_ids(self, text: str) -> np.ndarray:
        tokens = tokenize(text) or [_EMPTY_TOKEN]
        n = self.table.shape[0]
        ids = []
        for t in tokens:
            b = self._buckets.get(t)
            if b is None:
                b = self._buckets[t] = stable_hash64("tok", t) % n
            ids.append(b)
        return np.asarray(ids, dtype=np.int64)

    def embed(self, text: str) -> np.ndarray:
        return self.table[self.token_ids(text)].mean(axis=0)


class _Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.state[name] = (m, v)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class ToyModel:
    embedder: HashedEmbedder
    temperature: Temperature
    head: InteractionHead | None
    loss_trace: list[float] = field(default_factory=list)


def train_toy_embedder(
    batches: Sequence[Sequence[TrainingPair]],
    epochs: int,
    lr: float,
    seed: int,
    *,
    dim: int = 32,
    n_buckets: int = 4096,
    tau: float = 0.07,
    learn_tau: bool = True,
    pointwise_weight: float = 0.0,
    activation: str = "gelu",
) -> ToyModel:
    """Adam on the contrastive loss, optionally plus a weighted squared error of the head.

    Within a batch, pairs with a positive label are the contrastive rows;
    every document in the batch (soft negatives included) is a candidate
    column. The pointwise term covers all pairs and trains the head.
    """
    emb = HashedEmbedder.random(dim, n_buckets, seed)
    temp = Temperature.from_tau(tau)
    head = InteractionHead.random(dim, rng_for(seed, "head-init"), activation) if pointwise_weight > 0 else None
    opt = _Adam(lr)
    trace: list[float] = []

    for _ in range(epochs):
        losses = []
        for batch in batches:
            loss, grads = _batch_loss_and_grads(batch, emb, temp, head, pointwise_weight, learn_tau)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss!r} at epoch {len(trace)}")
            losses.append(loss)
            params = {"table": emb.table}
            if head is not None:
                params.update(w1=head.w1, b1=head.b1, w2=head.w2, b2=head.b2, w_out=head.w_out,
                              b_out=np.array([head.b_out]))
            if learn_tau:
                params["log_tau"] = np.array([temp.log_tau])
            opt.step(params, {k: v for k, v in grads.items() if k in params})
            if head is not None:
                head.b_out = float(params["b_out"][0])
            if learn_tau:
                temp.log_tau = float(params["log_tau"][0])
        epoch_loss = float(np.mean(losses)) if losses else 0.0
        if not math.isfinite(epoch_loss):
            raise DivergenceDetected(f"epoch loss became {epoch_loss!r}")
        trace.append(epoch_loss)
    return ToyModel(emb, temp, head, trace)


def _batch_loss_and_grads(batch, emb: HashedEmbedder, temp: Temperature, head, pointwise_weight, learn_tau):
    q_ids = [emb.token_ids(p.query) for p in batch]
    d_ids = [emb.token_ids(doc_text(p.doc.title, p.doc.bte)) for p in batch]
    q_vec = np.stack([emb.table[i].mean(axis=0) for i in q_ids])
    d_vec = np.stack([emb.table[i].mean(axis=0) for i in d_ids])
    g_q = np.zeros_like(q_vec)
    g_d = np.zeros_like(d_vec)
    grads: dict[str, np.ndarray] = {}
    loss = 0.0

    pos = [i for i, p in enumerate(batch) if p.label > 0]
    if pos:
        cols = pos + [i for i in range(len(batch)) if batch[i].label <= 0]
        res = contrastive_loss(q_vec[pos], d_vec[cols], temp.tau)
        loss += res.loss
        g_q[pos] += res.grad_q
        g_d[cols] += res.grad_d
        if learn_tau:
            grads["log_tau"] = np.array([res.grad_log_tau])

    if head is not None and pointwise_weight > 0:
        w_sum = sum(p.weight for p in batch)
        hg = {k: np.zeros_like(v, dtype=np.float64) for k, v in head.params().items()}
        pw = 0.0
        for i, p in enumerate(batch):
            s = head_forward(q_vec[i], d_vec[i], head)
            pw += p.weight * (s - p.label) ** 2
            up = pointwise_weight * 2.0 * p.weight * (s - p.label) / w_sum
            g = head_gradient(q_vec[i], d_vec[i], head, up)
            for k in ("w1", "b1", "w2", "b2", "w_out"):
                hg[k] += getattr(g, k)
            hg["b_out"] += g.b_out
            g_q[i] += g.q
            g_d[i] += g.d
        loss += pointwise_weight * pw / w_sum
        hg["b_out"] = hg["b_out"].reshape(1)
        grads.update(hg)

    table_grad = np.zeros_like(emb.table)
    for ids, g in zip(q_ids, g_q):
        np.add.at(table_grad, ids, g / len(ids))
    for ids, g in zip(d_ids, g_d):
        np.add.at(table_grad, ids, g / len(ids))
    grads["table"] = table_grad
    return loss, grads
