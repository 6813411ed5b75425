#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace retrobm25 {

using TokenId = std::uint32_t;
using ChunkId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;

/// Chunk id of a synthesized all-PAD continuation that is not stored anywhere.
inline constexpr ChunkId kNoChunk = 0xFFFFFFFFu;

enum class ErrorCode {
    invalid_argument,
    empty_corpus,
    unknown_chunk,
    bad_magic,
    truncated,
    non_finite,
    size_mismatch,
    zero_variance,
    degenerate,
    missing_index,
    missing_input,
    diverged,
    io,
};

/// Library error. The code lets callers (and the CLI) tell failure classes apart
/// without parsing messages.
class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

  private:
    ErrorCode code_;
};

/// Half-open range of chunk ids. A document's chunks always occupy one such range.
struct ChunkRange {
    ChunkId first = 0;
    std::uint32_t count = 0;

    bool contains(ChunkId id) const noexcept { return id >= first && id - first < count; }
};

/// Which chunks a search may return. `exclude` carries the same-document filter;
/// `allowed`, when set, restricts candidates further (e.g. the training split).
struct CandidateFilter {
    std::optional<ChunkRange> exclude;
    const std::vector<std::uint8_t>* allowed = nullptr;

    bool admits(ChunkId id) const noexcept {
        if (exclude && exclude->contains(id)) return false;
        return allowed == nullptr || (id < allowed->size() && (*allowed)[id] != 0);
    }
};

/// (chunk, score) with "higher is better" ordering used by lexical search.
struct ScoredChunk {
    ChunkId chunk_id = 0;
    double score = 0.0;

    friend bool operator==(const ScoredChunk&, const ScoredChunk&) = default;
};

/// Descending score, ascending chunk id.
inline bool ranks_before(const ScoredChunk& a, const ScoredChunk& b) noexcept {
    if (a.score != b.score) return a.score > b.score;
    return a.chunk_id < b.chunk_id;
}

}  // namespace retrobm25
