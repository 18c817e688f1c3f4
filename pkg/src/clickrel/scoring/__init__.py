"""Numeric kernels: interaction head, contrastive loss, BM25, toy embedder."""

from .bm25 import CorpusStats, bm25_score, tokenize
from .contrastive import ContrastiveResult, Temperature, contrastive_loss
from .embedder import HashedEmbedder, ToyModel, doc_text, train_toy_embedder
from .embfile import read_embeddings, write_embeddings
from .head import (
    HeadGradients,
    InteractionHead,
    cosine_sim,
    head_forward,
    head_gradient,
    load_head,
    save_head,
)

__all__ = [
    "ContrastiveResult", "CorpusStats", "HashedEmbedder", "HeadGradients", "InteractionHead",
    "Temperature", "ToyModel", "bm25_score", "contrastive_loss", "cosine_sim", "doc_text",
    "head_forward", "head_gradient", "load_head", "read_embeddings", "save_head", "tokenize",
    "train_toy_embedder", "write_embeddings",
]
