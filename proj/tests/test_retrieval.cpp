#include <gtest/gtest.h>

#include <algorithm>

#include "retrobm25/random.hpp"
#include "retrobm25/retrieval.hpp"

using namespace retrobm25;

namespace {

constexpr std::size_t kM = 8;
constexpr std::size_t kDim = 32;

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab = 200) {
    std::vector<TokenId> t(n);
    for (auto& x : t) x = static_cast<TokenId>(2 + rng.below(vocab));
    return t;
}

struct Fixture {
    ChunkStore store{kM};
    InvertedIndex bm25;
    EmbeddingMatrix dense;
    IVFIndex ivf;

    explicit Fixture(std::uint64_t seed, std::size_t docs = 40) {
        Rng rng(seed);
        for (std::size_t d = 0; d < docs; ++d) store.add_document("d" + std::to_string(d), random_tokens(rng, 3 + rng.below(30)));
        bm25 = InvertedIndex::build(store);
        dense = embed_store_hashed(store, kDim, 5);
        ivf = IVFIndex::build(dense, 6, 5);
    }

    Retriever retriever(bool with_ivf = false) const {
        Retriever r(store);
        r.with_bm25(bm25).with_dense(dense, with_ivf ? &ivf : nullptr, HashedEmbedder{kDim, 5});
        return r;
    }
};

RetrievalQuery stored_query(const ChunkStore& store, ChunkId id) {
    RetrievalQuery q;
    q.tokens = store.tokens(id);
    q.chunk_id = id;
    q.doc_id = store.doc_id(id);
    return q;
}

TEST(Retrieve, VerbatimCopyRanksFirst) {
    Rng rng(1);
    ChunkStore store(kM);
    std::vector<std::vector<TokenId>> docs;
    for (int d = 0; d < 20; ++d) docs.push_back(random_tokens(rng, kM));
    docs.push_back(docs[7]);  // doc 20 duplicates doc 7
    for (std::size_t d = 0; d < docs.size(); ++d) store.add_document("d" + std::to_string(d), docs[d]);
    auto bm25 = InvertedIndex::build(store);
    auto dense = embed_store_hashed(store, kDim, 1);
    Retriever r(store);
    r.with_bm25(bm25).with_dense(dense, nullptr, HashedEmbedder{kDim, 1});
    auto q = stored_query(store, 7);
    for (auto mode : {RetrievalMode::dense, RetrievalMode::bm25}) {
        RetrievalConfig cfg;
        cfg.mode = mode;
        auto res = r.retrieve(q, cfg);
        ASSERT_FALSE(res.neighbors.empty());
        EXPECT_EQ(res.neighbors[0].neighbor.chunk_id, 20u) << to_string(mode);
    }
}

TEST(Retrieve, SameDocumentOnlyIsEmpty) {
    ChunkStore store(kM);
    Rng rng(2);
    store.add_document("D", random_tokens(rng, 40));
    auto bm25 = InvertedIndex::build(store);
    auto dense = embed_store_hashed(store, kDim, 0);
    Retriever r(store);
    r.with_bm25(bm25).with_dense(dense, nullptr, HashedEmbedder{kDim, 0});
    for (auto mode : {RetrievalMode::dense, RetrievalMode::bm25, RetrievalMode::rerank}) {
        RetrievalConfig cfg;
        cfg.mode = mode;
        EXPECT_TRUE(r.retrieve(stored_query(store, 1), cfg).neighbors.empty());
    }
}

TEST(Retrieve, ZeroKRejected) {
    Fixture f(3);
    RetrievalConfig cfg;
    cfg.k = 0;
    EXPECT_THROW(f.retriever().retrieve(stored_query(f.store, 0), cfg), Error);
}

TEST(Retrieve, MissingIndexThrows) {
    Fixture f(3);
    Retriever r(f.store);
    RetrievalConfig cfg;
    try {
        r.retrieve(stored_query(f.store, 0), cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::missing_index);
    }
    r.with_dense(f.dense, nullptr, HashedEmbedder{kDim, 5});
    cfg.mode = RetrievalMode::rerank;
    EXPECT_THROW(r.retrieve(stored_query(f.store, 0), cfg), Error);
}

TEST(Retrieve, FilterSoundnessAndPairIntegrity) {
    Fixture f(4);
    auto r = f.retriever(true);
    for (auto mode : {RetrievalMode::dense, RetrievalMode::bm25, RetrievalMode::rerank}) {
        RetrievalConfig cfg;
        cfg.mode = mode;
        cfg.k = 4;
        cfg.candidate_k = 20;
        cfg.nprobe = 2;
        for (ChunkId c = 0; c < f.store.size(); c += 3) {
            auto q = stored_query(f.store, c);
            auto res = r.retrieve(q, cfg);
            for (std::size_t i = 0; i < res.neighbors.size(); ++i) {
                const auto& n = res.neighbors[i];
                EXPECT_NE(n.neighbor.doc_id, *q.doc_id);
                EXPECT_EQ(n.continuation.doc_id, n.neighbor.doc_id);
                auto expected = f.store.continuation(n.neighbor.chunk_id);
                EXPECT_EQ(n.continuation.chunk_id, expected.chunk_id);
                EXPECT_EQ(n.continuation.token_ids, expected.token_ids);
                EXPECT_EQ(n.source_mode, mode);
                if (i > 0) {
                    const auto& p = res.neighbors[i - 1];
                    EXPECT_TRUE(p.score > n.score || (p.score == n.score && p.neighbor.chunk_id < n.neighbor.chunk_id));
                }
            }
        }
    }
}

TEST(Rerank, FullPoolMatchesBm25) {
    Fixture f(5);
    auto r = f.retriever();
    RetrievalConfig bm25_cfg;
    bm25_cfg.mode = RetrievalMode::bm25;
    bm25_cfg.k = 5;
    RetrievalConfig rr = bm25_cfg;
    rr.mode = RetrievalMode::rerank;
    rr.candidate_k = f.store.size();
    for (ChunkId c = 0; c < f.store.size(); ++c) {
        auto q = stored_query(f.store, c);
        auto a = r.retrieve(q, bm25_cfg);
        auto b = r.retrieve(q, rr);
        ASSERT_EQ(a.neighbors.size(), b.neighbors.size());
        for (std::size_t i = 0; i < a.neighbors.size(); ++i) {
            EXPECT_EQ(a.neighbors[i].neighbor.chunk_id, b.neighbors[i].neighbor.chunk_id);
            EXPECT_EQ(a.neighbors[i].score, b.neighbors[i].score);
        }
    }
}

TEST(Rerank, ZeroScoresFallBackToChunkId) {
    Fixture f(6);
    std::vector<ChunkId> pool{9, 3, 14, 1};
    std::vector<TokenId> q{5000};
    auto out = rerank(pool, f.bm25, q, 2);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[0].chunk_id, 1u);
    EXPECT_EQ(out[1].chunk_id, 3u);
}

TEST(Rerank, HandComputedOrderAndContainment) {
    Fixture f(7);
    std::vector<ChunkId> pool{2, 11, 5, 17, 8};
    auto q = f.store.tokens(11);
    auto terms = query_terms(q);
    std::vector<ScoredChunk> oracle;
    for (auto c : pool) oracle.push_back({c, f.bm25.score(terms, c)});
    std::sort(oracle.begin(), oracle.end(), ranks_before);
    oracle.resize(3);
    auto out = rerank(pool, f.bm25, q, 3);
    EXPECT_EQ(out, oracle);
    for (const auto& s : out) EXPECT_NE(std::find(pool.begin(), pool.end(), s.chunk_id), pool.end());
}

TEST(Rerank, SubsetOfDensePool) {
    Fixture f(8);
    auto r = f.retriever(true);
    RetrievalConfig cfg;
    cfg.mode = RetrievalMode::rerank;
    cfg.candidate_k = 10;
    cfg.nprobe = 2;
    for (ChunkId c = 0; c < f.store.size(); c += 5) {
        auto q = stored_query(f.store, c);
        auto pool = r.dense_search(q, 10, cfg);
        for (const auto& n : r.retrieve(q, cfg).neighbors) {
            EXPECT_NE(std::find_if(pool.begin(), pool.end(), [&](const DenseHit& h) { return h.chunk_id == n.neighbor.chunk_id; }),
                      pool.end());
        }
    }
}

TEST(Recall, IdenticalRankingsGiveOne) {
    // With every chunk identical in length and each query's term set appearing
    // verbatim once elsewhere, both retrievers put that copy first.
    Rng rng(9);
    ChunkStore store(kM);
    std::vector<std::vector<TokenId>> base;
    for (int d = 0; d < 15; ++d) base.push_back(random_tokens(rng, kM, 5000));
    for (int d = 0; d < 15; ++d) store.add_document("a" + std::to_string(d), base[d]);
    for (int d = 0; d < 15; ++d) store.add_document("b" + std::to_string(d), base[d]);
    auto bm25 = InvertedIndex::build(store);
    auto dense = embed_store_hashed(store, 64, 2);
    Retriever r(store);
    r.with_bm25(bm25).with_dense(dense, nullptr, HashedEmbedder{64, 2});
    std::vector<RetrievalQuery> qs;
    for (ChunkId c = 0; c < 15; ++c) qs.push_back(stored_query(store, c));
    std::vector<std::size_t> ks{1};
    RetrievalConfig cfg;
    EXPECT_DOUBLE_EQ(r.recall_of_bm25_in_dense(qs, 1, ks, cfg)[0], 1.0);
}

TEST(Recall, MonotoneAndFullCoverage) {
    Fixture f(10, 80);
    auto r = f.retriever(true);
    std::vector<RetrievalQuery> qs;
    for (ChunkId c = 0; c < f.store.size(); c += 2) qs.push_back(stored_query(f.store, c));
    std::vector<std::size_t> ks{1, 5, 10, 50, f.store.size()};
    RetrievalConfig cfg;
    cfg.exact_dense = true;
    auto rec = r.recall_of_bm25_in_dense(qs, 4, ks, cfg);
    for (std::size_t i = 1; i < rec.size(); ++i) EXPECT_GE(rec[i], rec[i - 1]);
    EXPECT_DOUBLE_EQ(rec.back(), 1.0);
    for (double v : rec) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(BatchRetrieve, CountsAndFilter) {
    Fixture f(11);
    auto r = f.retriever();
    RetrievalConfig cfg;
    cfg.mode = RetrievalMode::bm25;
    std::vector<Chunk> one{f.store.chunk(0)};
    EXPECT_TRUE(r.batch_retrieve_for_sequence(one, cfg, f.store.doc_id(0)).empty());

    // Pick a document with at least three chunks.
    std::uint32_t doc = 0;
    while (f.store.document_range(doc).count < 3) ++doc;
    auto range = f.store.document_range(doc);
    std::vector<Chunk> seq;
    for (std::uint32_t i = 0; i < 3; ++i) seq.push_back(f.store.chunk(range.first + i));
    auto rets = r.batch_retrieve_for_sequence(seq, cfg, f.store.doc_ids()[doc]);
    ASSERT_EQ(rets.size(), 2u);
    for (std::size_t u = 0; u < rets.size(); ++u) {
        EXPECT_EQ(rets[u].query_chunk_id, std::optional<ChunkId>(range.first + u));
        for (const auto& n : rets[u].neighbors) EXPECT_NE(n.neighbor.doc_id, f.store.doc_ids()[doc]);
    }
}

TEST(Restriction, OnlyAllowedChunksReturned) {
    Fixture f(12);
    auto r = f.retriever();
    std::vector<std::uint8_t> allowed(f.store.size(), 0);
    for (ChunkId c = 0; c < f.store.size(); c += 2) allowed[c] = 1;
    r.restrict_to(allowed);
    for (auto mode : {RetrievalMode::dense, RetrievalMode::bm25, RetrievalMode::rerank}) {
        RetrievalConfig cfg;
        cfg.mode = mode;
        cfg.k = 5;
        cfg.candidate_k = 30;
        for (const auto& n : r.retrieve(stored_query(f.store, 3), cfg).neighbors) EXPECT_EQ(n.neighbor.chunk_id % 2, 0u);
    }
}

TEST(RetrievalConfig, Validation) {
    RetrievalConfig cfg;
    cfg.mode = RetrievalMode::rerank;
    cfg.k = 5;
    cfg.candidate_k = 4;
    EXPECT_THROW(cfg.validate(), Error);
    EXPECT_THROW(parse_retrieval_mode("sparse"), Error);
    EXPECT_EQ(parse_retrieval_mode("rerank"), RetrievalMode::rerank);
}

}  // namespace
