#include "retrobm25/retrieval.hpp"

#include <algorithm>
#include <unordered_set>

#include <fmt/core.h>

#include "retrobm25/parallel.hpp"

namespace retrobm25 {

std::string_view to_string(RetrievalMode mode) {
    switch (mode) {
        case RetrievalMode::dense: return "dense";
        case RetrievalMode::bm25: return "bm25";
        case RetrievalMode::rerank: return "rerank";
    }
    return "?";
}

RetrievalMode parse_retrieval_mode(std::string_view name) {
    if (name == "dense") return RetrievalMode::dense;
    if (name == "bm25") return RetrievalMode::bm25;
    if (name == "rerank") return RetrievalMode::rerank;
    throw Error(ErrorCode::invalid_argument, fmt::format("unknown retrieval mode '{}'", name));
}

void RetrievalConfig::validate() const {
    if (k == 0) throw Error(ErrorCode::invalid_argument, "retrieval: k must be >= 1");
    if (mode == RetrievalMode::rerank && candidate_k < k) {
        throw Error(ErrorCode::invalid_argument, "retrieval: candidate_K must be >= k for rerank");
    }
    if (nprobe == 0) throw Error(ErrorCode::invalid_argument, "retrieval: nprobe must be >= 1");
}

std::vector<ScoredChunk> rerank(std::span<const ChunkId> candidates, const InvertedIndex& index,
                                std::span<const TokenId> query_tokens, std::size_t k) {
    if (k == 0) throw Error(ErrorCode::invalid_argument, "rerank: k must be >= 1");
    auto terms = query_terms(query_tokens);
    if (terms.empty()) return {};
    std::vector<ScoredChunk> scored;
    scored.reserve(candidates.size());
    for (auto c : candidates) scored.push_back({c, index.score(terms, c)});
    auto keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), ranks_before);
    scored.resize(keep);
    return scored;
}

Retriever& Retriever::with_bm25(const InvertedIndex& index) {
    if (index.num_chunks() != store_->size()) {
        throw Error(ErrorCode::size_mismatch, "bm25 index was built over a different chunk store");
    }
    bm25_ = &index;
    return *this;
}

Retriever& Retriever::with_dense(const EmbeddingMatrix& matrix, const IVFIndex* ivf,
                                 std::optional<HashedEmbedder> embedder) {
    if (matrix.rows() != store_->size()) {
        throw Error(ErrorCode::size_mismatch,
                    fmt::format("embedding matrix has {} rows, chunk store has {}", matrix.rows(), store_->size()));
    }
    if (ivf && ivf->dim() != matrix.dim()) throw Error(ErrorCode::size_mismatch, "ivf dimension differs from matrix");
    if (embedder && embedder->dim != matrix.dim()) {
        throw Error(ErrorCode::size_mismatch, "hashed embedder dimension differs from matrix");
    }
    matrix_ = &matrix;
    ivf_ = ivf;
    embedder_ = embedder;
    return *this;
}

Retriever& Retriever::restrict_to(std::vector<std::uint8_t> allowed) {
    if (allowed.size() != store_->size()) throw Error(ErrorCode::size_mismatch, "restriction mask size differs");
    allowed_ = std::move(allowed);
    return *this;
}

CandidateFilter Retriever::filter_for(const RetrievalQuery& query) const {
    CandidateFilter f;
    if (query.doc_id) f.exclude = store_->document_range(*query.doc_id);
    if (!allowed_.empty()) f.allowed = &allowed_;
    return f;
}

std::vector<float> Retriever::query_embedding(const RetrievalQuery& query) const {
    if (!matrix_) throw Error(ErrorCode::missing_index, "dense retrieval requested but no dense index is attached");
    if (!query.embedding.empty()) return {query.embedding.begin(), query.embedding.end()};
    if (embedder_) return embed_hashed(query.tokens, embedder_->dim, embedder_->seed);
    if (query.chunk_id) {
        auto row = matrix_->row(*query.chunk_id);
        return {row.begin(), row.end()};
    }
    throw Error(ErrorCode::missing_input, "no query vector: external embeddings need a per-query vector");
}

std::vector<DenseHit> Retriever::dense_search(const RetrievalQuery& query, std::size_t k,
                                              const RetrievalConfig& cfg) const {
    auto vec = query_embedding(query);
    SearchParams params{k, cfg.nprobe, filter_for(query)};
    if (ivf_ && !cfg.exact_dense) {
        params.nprobe = std::min(cfg.nprobe, ivf_->nlist());
        return ivf_->search(*matrix_, vec, params);
    }
    return exact_search(*matrix_, vec, params);
}

std::vector<ScoredChunk> Retriever::bm25_search(const RetrievalQuery& query, std::size_t k) const {
    if (!bm25_) throw Error(ErrorCode::missing_index, "bm25 retrieval requested but no bm25 index is attached");
    return bm25_->topk(query_terms(query.tokens), k, filter_for(query));
}

RetrievalResult Retriever::retrieve(const RetrievalQuery& query, const RetrievalConfig& cfg) const {
    cfg.validate();
    std::vector<ScoredChunk> picked;
    switch (cfg.mode) {
        case RetrievalMode::dense:
            for (const auto& h : dense_search(query, cfg.k, cfg)) picked.push_back({h.chunk_id, -h.sq_l2});
            break;
        case RetrievalMode::bm25:
            picked = bm25_search(query, cfg.k);
            break;
        case RetrievalMode::rerank: {
            if (!bm25_) throw Error(ErrorCode::missing_index, "rerank requested but no bm25 index is attached");
            std::vector<ChunkId> pool;
            for (const auto& h : dense_search(query, cfg.candidate_k, cfg)) pool.push_back(h.chunk_id);
            if (!pool.empty()) picked = rerank(pool, *bm25_, query.tokens, cfg.k);
            break;
        }
    }
    RetrievalResult result;
    result.query_chunk_id = query.chunk_id;
    result.neighbors.reserve(picked.size());
    for (const auto& p : picked) {
        result.neighbors.push_back({store_->chunk(p.chunk_id), store_->continuation(p.chunk_id), p.score, cfg.mode});
    }
    return result;
}

std::vector<RetrievalResult> Retriever::batch_retrieve_for_sequence(std::span<const Chunk> sequence,
                                                                    const RetrievalConfig& cfg,
                                                                    std::optional<std::string> source_doc,
                                                                    const EmbeddingMatrix* query_vectors) const {
    if (sequence.size() <= 1) return {};
    for (const auto& c : sequence) {
        if (c.token_ids.size() != store_->chunk_size()) {
            throw Error(ErrorCode::size_mismatch, "sequence chunk size differs from the store's");
        }
    }
    if (query_vectors && query_vectors->rows() < sequence.size() - 1) {
        throw Error(ErrorCode::size_mismatch, "fewer query vectors than retrieval queries");
    }
    std::vector<RetrievalResult> out(sequence.size() - 1);
    parallel_for(out.size(), [&](std::size_t u) {
        const auto& c = sequence[u];
        RetrievalQuery q;
        q.tokens = c.token_ids;
        if (c.chunk_id != kNoChunk && c.chunk_id < store_->size() && store_->doc_id(c.chunk_id) == c.doc_id) {
            q.chunk_id = c.chunk_id;
        }
        q.doc_id = source_doc;
        if (query_vectors) q.embedding = query_vectors->row(u);
        out[u] = retrieve(q, cfg);
    });
    return out;
}

std::vector<double> Retriever::recall_of_bm25_in_dense(std::span<const RetrievalQuery> queries, std::size_t k_bm25,
                                                       std::span<const std::size_t> dense_ks,
                                                       const RetrievalConfig& dense_cfg) const {
    if (dense_ks.empty()) return {};
    if (k_bm25 == 0) throw Error(ErrorCode::invalid_argument, "recall: k_bm25 must be >= 1");
    auto max_k = *std::max_element(dense_ks.begin(), dense_ks.end());
    if (max_k == 0) throw Error(ErrorCode::invalid_argument, "recall: K_dense must be >= 1");

    // Per query: for each K, |intersection| and |bm25 list|.
    std::vector<std::vector<std::size_t>> hits(queries.size());
    std::vector<std::size_t> denom(queries.size(), 0);
    parallel_for(queries.size(), [&](std::size_t qi) {
        auto lexical = bm25_search(queries[qi], k_bm25);
        denom[qi] = lexical.size();
        hits[qi].assign(dense_ks.size(), 0);
        if (lexical.empty()) return;
        // The dense top-K lists for smaller K are prefixes of the top-max_k list.
        auto dense = dense_search(queries[qi], max_k, dense_cfg);
        for (std::size_t ki = 0; ki < dense_ks.size(); ++ki) {
            std::unordered_set<ChunkId> top;
            for (std::size_t r = 0; r < std::min(dense_ks[ki], dense.size()); ++r) top.insert(dense[r].chunk_id);
            for (const auto& l : lexical) hits[qi][ki] += top.contains(l.chunk_id) ? 1 : 0;
        }
    });

    std::vector<double> out(dense_ks.size(), 0.0);
    std::size_t counted = 0;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        if (denom[qi] == 0) continue;
        ++counted;
        for (std::size_t ki = 0; ki < dense_ks.size(); ++ki) {
            out[ki] += static_cast<double>(hits[qi][ki]) / static_cast<double>(denom[qi]);
        }
    }
    if (counted == 0) throw Error(ErrorCode::degenerate, "recall: no query produced BM25 results");
    for (auto& v : out) v /= static_cast<double>(counted);
    return out;
}

}  // namespace retrobm25
