#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "retrobm25/corpus.hpp"

namespace retrobm25 {

/// Copy-task corpus: documents of i.i.d. Zipf-distributed words, each with a
/// noisy twin under another doc_id. The first `eval_pairs` originals form the
/// "eval" split; their twins, and both members of the other pairs, are "train".
struct CopyCorpusConfig {
    std::size_t pairs = 150;
    std::size_t eval_pairs = 30;
    std::size_t min_chunks = 4;
    std::size_t max_chunks = 8;
    std::size_t chunk_size = 64;
    std::size_t words = 1500;
    double zipf_exponent = 1.0;
    /// Probability that a twin token is redrawn from the word distribution.
    double substitution = 0.1;
    std::uint64_t seed = 7;

    void validate() const;
};

std::vector<CorpusRecord> make_copy_corpus(const CopyCorpusConfig& cfg);

/// Serializes records in the corpus JSON-lines format, one object per line.
std::string to_jsonl(std::span<const CorpusRecord> records);

}  // namespace retrobm25
