#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retrobm25/bm25_index.hpp"
#include "retrobm25/common.hpp"
#include "retrobm25/corpus.hpp"
#include "retrobm25/dense_index.hpp"

namespace retrobm25 {

enum class RetrievalMode { dense, bm25, rerank };

std::string_view to_string(RetrievalMode mode);
RetrievalMode parse_retrieval_mode(std::string_view name);

struct RetrievalConfig {
    RetrievalMode mode = RetrievalMode::dense;
    std::size_t k = 2;
    std::size_t candidate_k = 1000;
    /// Lists scanned by the IVF index when one is attached and exact_dense is false.
    std::size_t nprobe = 8;
    bool exact_dense = false;

    void validate() const;
};

/// One [N; F] pair. Scores are "higher is better" in every mode: BM25 for
/// bm25/rerank, negated squared L2 for dense.
struct RetrievedNeighbor {
    Chunk neighbor;
    Chunk continuation;
    double score = 0.0;
    RetrievalMode source_mode = RetrievalMode::dense;
};

struct RetrievalResult {
    std::optional<ChunkId> query_chunk_id;
    std::vector<RetrievedNeighbor> neighbors;
};

/// Seeded feature-hashing provider for query vectors (matches embed_store_hashed).
struct HashedEmbedder {
    std::size_t dim = 64;
    std::uint64_t seed = 0;
};

struct RetrievalQuery {
    std::span<const TokenId> tokens;
    /// Set when the query is itself a stored chunk.
    std::optional<ChunkId> chunk_id;
    /// Source document; its chunks are never returned.
    std::optional<std::string> doc_id;
    /// External query vector. When empty the hashed provider (or the stored row
    /// for chunk_id) is used.
    std::span<const float> embedding;
};

/// Rescores dense candidates with BM25 and keeps the top k (descending BM25,
/// ascending chunk id). The output is a subset of `candidates`; an empty term set
/// yields nothing, matching InvertedIndex::topk.
std::vector<ScoredChunk> rerank(std::span<const ChunkId> candidates, const InvertedIndex& index,
                                std::span<const TokenId> query_tokens, std::size_t k);

/// Read-only view over a chunk store and whichever indices have been attached.
/// All methods are const and safe to call concurrently.
class Retriever {
  public:
    explicit Retriever(const ChunkStore& store) : store_(&store) {}

    Retriever& with_bm25(const InvertedIndex& index);
    Retriever& with_dense(const EmbeddingMatrix& matrix, const IVFIndex* ivf = nullptr,
                          std::optional<HashedEmbedder> embedder = std::nullopt);
    /// Restricts every search to chunks with allowed[id] != 0.
    Retriever& restrict_to(std::vector<std::uint8_t> allowed);

    const ChunkStore& store() const noexcept { return *store_; }
    bool has_bm25() const noexcept { return bm25_ != nullptr; }
    bool has_dense() const noexcept { return matrix_ != nullptr; }
    const EmbeddingMatrix* dense_matrix() const noexcept { return matrix_; }

    RetrievalResult retrieve(const RetrievalQuery& query, const RetrievalConfig& cfg) const;

    /// RET(C_u) for u = 1..l-1 of an evaluation sequence (empty when l <= 1).
    /// `query_vectors`, when given, supplies row u-1 as the dense query for C_u.
    std::vector<RetrievalResult> batch_retrieve_for_sequence(std::span<const Chunk> sequence,
                                                             const RetrievalConfig& cfg,
                                                             std::optional<std::string> source_doc,
                                                             const EmbeddingMatrix* query_vectors = nullptr) const;

    /// Mean over queries of |BM25 top-k_bm25 ∩ dense top-K| / |BM25 top-k_bm25|,
    /// one value per entry of `dense_ks`. Queries with no BM25 hits are skipped.
    std::vector<double> recall_of_bm25_in_dense(std::span<const RetrievalQuery> queries, std::size_t k_bm25,
                                                std::span<const std::size_t> dense_ks,
                                                const RetrievalConfig& dense_cfg) const;

    std::vector<float> query_embedding(const RetrievalQuery& query) const;
    std::vector<DenseHit> dense_search(const RetrievalQuery& query, std::size_t k, const RetrievalConfig& cfg) const;
    std::vector<ScoredChunk> bm25_search(const RetrievalQuery& query, std::size_t k) const;
    CandidateFilter filter_for(const RetrievalQuery& query) const;

  private:
    const ChunkStore* store_;
    const InvertedIndex* bm25_ = nullptr;
    const EmbeddingMatrix* matrix_ = nullptr;
    const IVFIndex* ivf_ = nullptr;
    std::optional<HashedEmbedder> embedder_;
    std::vector<std::uint8_t> allowed_;
};

}  // namespace retrobm25
