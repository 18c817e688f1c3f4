"""Bi-encoder interaction head: forward pass and exact gradients.

Pipeline: elementwise max of the two embeddings -> two dense layers with a
residual connection -> concatenated with the Euclidean distance and cosine
similarity of the embeddings -> linear layer + sigmoid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple

import numpy as np
from scipy.special import expit, ndtr

from ..errors import DataError, NonFinite, ShapeMismatch, ZeroVector

_HEAD_MAGIC = b"CRHD"
_HEAD_VERSION = 1
ACTIVATIONS = ("gelu", "tanh")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"{name} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFinite(f"{name} has non-finite entries")
    return v


def cosine_sim(q, d) -> float:
    q = _as_vector(q, "q")
    d = _as_vector(d, "d")
    if q.shape != d.shape:
        raise ShapeMismatch(f"dimension mismatch {q.shape} vs {d.shape}")
    nq, nd = np.linalg.norm(q), np.linalg.norm(d)
    if nq == 0.0 or nd == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(q @ d / (nq * nd), -1.0, 1.0))


def _activate(kind: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (f(x), f'(x))."""
    if kind == "gelu":
        cdf = ndtr(x)
        return x * cdf, cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    t = np.tanh(x)
    return t, 1.0 - t * t


@dataclass
class InteractionHead:
    w1: np.ndarray  # (d, d)
    b1: np.ndarray  # (d,)
    w2: np.ndarray  # (d, d)
    b2: np.ndarray  # (d,)
    w_out: np.ndarray  # (d + 2,)
    b_out: float
    activation: str = "gelu"

    def __post_init__(self):
        d = self.b1.shape[0]
        shapes = {"w1": (d, d), "b1": (d,), "w2": (d, d), "b2": (d,), "w_out": (d + 2,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def dim(self) -> int:
        return self.b1.shape[0]

    @classmethod
    def zeros(cls, dim: int, activation: str = "gelu") -> "InteractionHead":
        return cls(np.zeros((dim, dim)), np.zeros(dim), np.zeros((dim, dim)), np.zeros(dim),
                   np.zeros(dim + 2), 0.0, activation)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, activation: str = "gelu", scale: float = 1.0) -> "InteractionHead":
        s = scale / np.sqrt(dim)
        return cls(
            rng.normal(0, s, (dim, dim)), rng.normal(0, s, dim),
            rng.normal(0, s, (dim, dim)), rng.normal(0, s, dim),
            rng.normal(0, s, dim + 2), float(rng.normal(0, s)), activation,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w_out": self.w_out, "b_out": np.array(self.b_out)}

    def copy(self) -> "InteractionHead":
        return InteractionHead(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                               self.w_out.copy(), float(self.b_out), self.activation)


class HeadGradients(NamedTuple):
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: float
    q: np.ndarray
    d: np.ndarray


def _check_pair(q, d, head: InteractionHead) -> tuple[np.ndarray, np.ndarray]:
    q = _as_vector(q, "q")
    d = _as_vector(d, "d")
    if q.shape != d.shape or q.shape[0] != head.dim:
        raise ShapeMismatch(f"embedding shapes {q.shape}/{d.shape} do not fit a head of dimension {head.dim}")
    return q, d


def _forward(q: np.ndarray, d: np.ndarray, head: InteractionHead):
    nq, nd = np.linalg.norm(q), np.linalg.norm(d)
    if nq == 0.0 or nd == 0.0:
        raise ZeroVector("interaction head needs nonzero embeddings")
    take_q = q >= d
    m = np.where(take_q, q, d)
    a1 = head.w1 @ m + head.b1
    g, g_prime = _activate(head.activation, a1)
    h = m + head.w2 @ g + head.b2
    diff = q - d
    dist = float(np.sqrt(diff @ diff))
    cos = float(q @ d / (nq * nd))
    z = np.concatenate([h, [dist, cos]])
    score = float(expit(head.w_out @ z + head.b_out))
    return score, (take_q, m, g, g_prime, z, diff, dist, cos, nq, nd)


def head_forward(q, d, head: InteractionHead) -> float:
    q, d = _check_pair(q, d, head)
    return _forward(q, d, head)[0]


def head_gradient(q, d, head: InteractionHead, upstream: float) -> HeadGradients:
    """Gradients of ``upstream * score`` w.r.t. every head weight and both embeddings.

    Subgradient conventions: the elementwise max routes to ``q`` on ties;
    the distance feature has zero gradient when ``q == d``.
    """
    q, d = _check_pair(q, d, head)
    score, (take_q, m, g, g_prime, z, diff, dist, cos, nq, nd) = _forward(q, d, head)
    dlogit = upstream * score * (1.0 - score)
    dim = head.dim

    g_w_out = dlogit * z
    dz = dlogit * head.w_out
    dh, ddist, dcos = dz[:dim], dz[dim], dz[dim + 1]

    g_w2 = np.outer(dh, g)
    da1 = (head.w2.T @ dh) * g_prime
    g_w1 = np.outer(da1, m)
    dm = dh + head.w1.T @ da1

    dq = np.where(take_q, dm, 0.0)
    dd = np.where(take_q, 0.0, dm)
    if dist > 0.0:
        unit = diff / dist
        dq = dq + ddist * unit
        dd = dd - ddist * unit
    dq = dq + dcos * (d / (nq * nd) - cos * q / (nq * nq))
    dd = dd + dcos * (q / (nq * nd) - cos * d / (nd * nd))
    return HeadGradients(g_w1, da1, g_w2, dh.copy(), g_w_out, float(dlogit), dq, dd)


def save_head(sink: BinaryIO, head: InteractionHead) -> None:
    sink.write(_HEAD_MAGIC)
    sink.write(struct.pack("<III", _HEAD_VERSION, head.dim, ACTIVATIONS.index(head.activation)))
    for arr in (head.w1, head.b1, head.w2, head.b2, head.w_out, np.array([head.b_out])):
        sink.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_head(source: BinaryIO) -> InteractionHead:
    if source.read(4) != _HEAD_MAGIC:
        raise DataError("not an interaction-head file (bad magic)")
    header = source.read(12)
    if len(header) != 12:
        raise DataError("truncated head header")
    version, dim, act = struct.unpack("<III", header)
    if act >= len(ACTIVATIONS):
        raise DataError(f"unknown activation index {act}")
    if version != _HEAD_VERSION:
        raise DataError(f"unsupported head file version {version}")
    n = 2 * dim * dim + 3 * dim + 3
    raw = source.read(8 * n)
    if len(raw) != 8 * n:
        raise DataError("truncated head file")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    parts, off = [], 0
    for size in (dim * dim, dim, dim * dim, dim, dim + 2, 1):
        parts.append(flat[off:off + size])
        off += size
    return InteractionHead(parts[0].reshape(dim, dim), parts[1], parts[2].reshape(dim, dim), parts[3],
                           parts[4], float(parts[5][0]), ACTIVATIONS[act])
