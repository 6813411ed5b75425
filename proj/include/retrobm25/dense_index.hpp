#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "retrobm25/common.hpp"
#include "retrobm25/corpus.hpp"

namespace retrobm25 {

/// Row-major n x d float matrix; row i is the dense representation of chunk i.
class EmbeddingMatrix {
  public:
    EmbeddingMatrix() = default;
    EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<float> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t dim() const noexcept { return dim_; }
    std::span<const float> row(std::size_t i) const { return std::span(values_).subspan(i * dim_, dim_); }
    std::span<const float> values() const noexcept { return values_; }

    std::vector<std::uint8_t> serialize() const;
    /// EMB1 parsing. Errors: bad_magic, truncated, non_finite, size_mismatch.
    static EmbeddingMatrix deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;

  private:
    std::size_t rows_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> values_;
};

/// Loads an EMB1 file; when `expected_rows` is set the row count must match it.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path,
                                std::optional<std::size_t> expected_rows = std::nullopt);

/// Signed feature hashing over the chunk's unique non-PAD tokens, L2-normalized.
/// An all-PAD chunk maps to the zero vector.
std::vector<float> embed_hashed(std::span<const TokenId> tokens, std::size_t dim, std::uint64_t seed);
EmbeddingMatrix embed_store_hashed(const ChunkStore& store, std::size_t dim, std::uint64_t seed);

/// Squared L2 accumulated in double.
double squared_l2(std::span<const float> a, std::span<const float> b);

struct DenseHit {
    ChunkId chunk_id = 0;
    double sq_l2 = 0.0;

    friend bool operator==(const DenseHit&, const DenseHit&) = default;
};

/// Ascending distance, then ascending chunk id.
inline bool closer(const DenseHit& a, const DenseHit& b) noexcept {
    if (a.sq_l2 != b.sq_l2) return a.sq_l2 < b.sq_l2;
    return a.chunk_id < b.chunk_id;
}

struct SearchParams {
    std::size_t k = 10;
    std::size_t nprobe = 1;
    CandidateFilter filter;
};

std::vector<DenseHit> exact_search(const EmbeddingMatrix& matrix, std::span<const float> query,
                                   const SearchParams& params);

/// IVF-flat index: k-means centroids partition the rows; a query scans the
/// lists of its nprobe nearest centroids.
class IVFIndex {
  public:
    static constexpr int kKMeansIterations = 25;

    static IVFIndex build(const EmbeddingMatrix& matrix, std::size_t nlist, std::uint64_t seed);

    std::vector<DenseHit> search(const EmbeddingMatrix& matrix, std::span<const float> query,
                                 const SearchParams& params) const;
    /// The nprobe nearest centroids, nearest first (ties: lower index).
    std::vector<std::uint32_t> probe_order(std::span<const float> query, std::size_t nprobe) const;

    std::size_t nlist() const noexcept { return lists_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::span<const float> centroid(std::size_t c) const { return std::span(centroids_).subspan(c * dim_, dim_); }
    const std::vector<ChunkId>& list(std::size_t c) const { return lists_.at(c); }

    std::vector<std::uint8_t> serialize() const;
    static IVFIndex deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static IVFIndex load(const std::filesystem::path& path);

  private:
    std::size_t dim_ = 0;
    std::uint64_t seed_ = 0;
    std::vector<float> centroids_;
    std::vector<std::vector<ChunkId>> lists_;
};

std::vector<DenseHit> approx_search(const IVFIndex& ivf, const EmbeddingMatrix& matrix, std::span<const float> query,
                                    const SearchParams& params);

}  // namespace retrobm25
