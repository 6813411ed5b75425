"""Toy retrieval-augmented language model with BM25, dense and reranked retrieval."""

from ._core import (
    PAD,
    UNK,
    Corpus,
    Model,
    RetroError,
    bpb,
    chunk_perplexity,
    embed_hashed,
    gradient_check,
    make_copy_corpus,
    pearson,
    reduction_fraction,
    rerank_gain_fraction,
    spearman,
    unigram_overlap,
)

__all__ = [
    "PAD",
    "UNK",
    "Corpus",
    "Model",
    "RetroError",
    "bpb",
    "chunk_perplexity",
    "embed_hashed",
    "gradient_check",
    "make_copy_corpus",
    "pearson",
    "reduction_fraction",
    "rerank_gain_fraction",
    "spearman",
    "unigram_overlap",
]
