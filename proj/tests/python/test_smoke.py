import math

import numpy as np
import pytest

import retrobm25 as rb

TOY = [
    {"id": "d0", "text": "a a b"},
    {"id": "d1", "text": "a c"},
    {"id": "d2", "text": "b b b b"},
]

TINY = dict(vocab_size=12, d_model=8, n_heads=2, n_decoder_layers=2, n_encoder_layers=1,
            cca_layers=[1], chunk_size=2, neighbors=1, max_seq_len=8, rel_buckets=8, d_ff=16, seed=3)


def test_bm25_toy_ordering():
    corpus = rb.Corpus(TOY, chunk_size=4)
    corpus.build_bm25()
    hits = corpus.bm25_topk("a", k=3)
    assert [c for c, _ in hits] == [0, 1, 2]
    assert hits[0][1] > hits[1][1] > 0.0
    assert hits[2][1] == 0.0


def test_retrieve_excludes_source_document():
    records = rb.make_copy_corpus(pairs=6, eval_pairs=2, seed=1)
    corpus = rb.Corpus(records, chunk_size=64, vocab_size=2000)
    corpus.build_bm25()
    corpus.build_dense(dim=16, nlist=2)
    for mode in ("bm25", "dense", "rerank"):
        neighbors = corpus.retrieve(chunk_id=0, mode=mode, k=2, candidate_k=20)
        assert len(neighbors) == 2
        assert all(n["doc_id"] != corpus.doc_id(0) for n in neighbors)


def test_retrieve_needs_one_query():
    corpus = rb.Corpus(TOY, chunk_size=4)
    corpus.build_bm25()
    with pytest.raises(rb.RetroError) as info:
        corpus.retrieve()
    assert info.value.code == "invalid_argument"


def test_missing_index_is_reported():
    corpus = rb.Corpus(TOY, chunk_size=4)
    with pytest.raises(rb.RetroError) as info:
        corpus.bm25_topk("a")
    assert info.value.code == "missing_index"


def test_forward_rows_are_distributions():
    model = rb.Model(**TINY)
    tokens = [2, 3, 4, 5, 6, 7]
    rets = [[[2, 3, 4, 5]], [[6, 7, 8, 9]]]
    probs = model.forward(tokens, rets, retrieval="on")
    assert probs.shape == (6, 12)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    off = model.forward(tokens, retrieval="off")
    np.testing.assert_allclose(off[:1], probs[:1], atol=1e-6)


def test_chunk_perplexity_uniform():
    probs = np.full((4, 10), 0.1, dtype=np.float32)
    assert math.isclose(rb.chunk_perplexity(probs, [2, 3, 4, 5], 2, 2), 10.0, rel_tol=1e-5)


def test_training_reduces_loss():
    model = rb.Model(**TINY)
    seq = [2, 3, 4, 5, 6, 7, 8, 9]
    before = model.loss(seq, retrieval="off")
    losses = model.train([seq], steps=60, lr=1e-2, retrieval="off", grad_clip=1.0)
    assert len(losses) == 60
    assert model.loss(seq, retrieval="off") < before


def test_gradient_check_passes():
    report = rb.gradient_check(check_seed=0, retrieval="on", **TINY)
    assert report["max_rel_error"] < 1e-5
    assert report["max_cca_grad"] > 0.0


def test_analytics():
    assert rb.unigram_overlap([2, 3], [2, 2, 5, 6]) == pytest.approx(0.5)
    assert rb.spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert rb.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert rb.reduction_fraction(10.0, 8.0) == pytest.approx(0.2)
    assert rb.bpb(1.0, 1.0) == pytest.approx(1.0 / math.log(2))
