#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "retrobm25/common.hpp"
#include "retrobm25/corpus.hpp"

namespace retrobm25 {

struct BM25Params {
    double k1 = 0.9;
    double b = 0.4;

    void validate() const;
};

struct Posting {
    ChunkId chunk_id;
    std::uint32_t term_freq;

    friend bool operator==(const Posting&, const Posting&) = default;
};

/// Smoothed, always-positive IDF: ln(1 + (N - n + 0.5) / (n + 0.5)).
inline double bm25_idf(std::size_t num_chunks, std::size_t doc_freq) {
    auto n = static_cast<double>(doc_freq);
    return std::log(1.0 + (static_cast<double>(num_chunks) - n + 0.5) / (n + 0.5));
}

/// One term's contribution to a chunk's score.
inline double bm25_term_weight(double idf, std::uint32_t tf, double chunk_len, double avgdl, const BM25Params& p) {
    auto f = static_cast<double>(tf);
    double norm = avgdl > 0.0 ? chunk_len / avgdl : 0.0;
    return idf * f * (p.k1 + 1.0) / (f + p.k1 * (1.0 - p.b + p.b * norm));
}

/// Unique non-PAD tokens in ascending id order. Scores always sum term
/// contributions in this order, so every scoring path is bit-identical.
std::vector<TokenId> query_terms(std::span<const TokenId> tokens);

/// Chunk-level inverted index with Okapi BM25 scoring. Each chunk is one
/// "document"; lengths exclude PAD.
class InvertedIndex {
  public:
    static InvertedIndex build(const ChunkStore& store, BM25Params params = {});

    /// Sum over `terms` (expected sorted and unique, see query_terms) of the
    /// per-term weight. Unknown terms contribute 0.
    double score(std::span<const TokenId> terms, ChunkId chunk) const;

    /// Exact top-k. Every admitted chunk is a candidate (zero scores included)
    /// but an empty term set returns nothing. Ordered by descending score, then
    /// ascending chunk id.
    std::vector<ScoredChunk> topk(std::span<const TokenId> terms, std::size_t k,
                                  const CandidateFilter& filter = {}) const;

    double idf(TokenId term) const;
    std::size_t doc_freq(TokenId term) const;
    std::span<const Posting> postings(TokenId term) const;
    std::uint32_t chunk_length(ChunkId chunk) const;
    std::size_t num_chunks() const noexcept { return chunk_lengths_.size(); }
    std::size_t num_terms() const noexcept { return postings_.size(); }
    double avgdl() const noexcept { return avgdl_; }
    const BM25Params& params() const noexcept { return params_; }

    std::vector<std::uint8_t> serialize() const;
    static InvertedIndex deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static InvertedIndex load(const std::filesystem::path& path);

  private:
    BM25Params params_;
    double avgdl_ = 0.0;
    std::vector<std::uint32_t> chunk_lengths_;
    std::vector<std::vector<Posting>> postings_;  // indexed by term id
    std::vector<double> idf_;
};

}  // namespace retrobm25
