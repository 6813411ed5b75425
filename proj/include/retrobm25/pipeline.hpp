#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retrobm25/analytics.hpp"
#include "retrobm25/corpus.hpp"
#include "retrobm25/retrieval.hpp"
#include "retrobm25/retro_lm.hpp"

namespace retrobm25 {

/// Chunked corpus plus the split label of every stored document.
struct IngestedCorpus {
    Vocabulary vocab;
    ChunkStore store;
    std::vector<std::string> splits;  // indexed by document index
};

/// Text records get a vocabulary built from the corpus; pre-tokenized records
/// keep their ids and get placeholder names ("t<id>"). Mixing the two throws.
IngestedCorpus ingest_records(std::span<const CorpusRecord> records, std::size_t chunk_size, std::size_t vocab_size);

/// "doc_id<TAB>split" per line, in document order.
std::string splits_to_text(const ChunkStore& store, std::span<const std::string> splits);
std::vector<std::string> splits_from_text(std::string_view text, const ChunkStore& store);

/// 1 for chunks of documents whose split equals `split`.
std::vector<std::uint8_t> split_mask(const ChunkStore& store, std::span<const std::string> splits,
                                     std::string_view split = "train");
std::vector<std::uint32_t> documents_in_split(std::span<const std::string> splits, std::string_view split);

/// Consecutive chunks of one document, at most max_seq_len tokens. `tokens`
/// concatenates the chunks, trailing PAD included.
struct Sequence {
    std::string id;
    std::string doc_id;
    std::vector<Chunk> chunks;
    std::vector<TokenId> tokens;
};

std::vector<Sequence> document_sequences(const ChunkStore& store, std::span<const std::uint32_t> doc_indices,
                                         std::size_t max_chunks);

/// Freezes RET(C_u) for every training sequence (retrieval on) or leaves it empty.
std::vector<lm::TrainingSequence> prepare_training(const Retriever& retriever, std::span<const Sequence> sequences,
                                                   const RetrievalConfig& cfg, lm::RetrievalSwitch mode);

struct EvalOptions {
    bool on = true;
    bool off = true;
    RetrievalConfig retrieval;
    OverlapMetric overlap = OverlapMetric::containment;
};

/// Per-chunk records (u >= 2) plus corpus-level token loss for each pass.
struct EvalRun {
    std::vector<EvalRecord> records;
    double nll_on = 0.0;
    double nll_off = 0.0;
    std::size_t targets = 0;

    std::optional<double> ppl_on() const;
    std::optional<double> ppl_off() const;
};

EvalRun evaluate(const lm::ModelConfig& cfg, const lm::Params<float>& params, const Retriever& retriever,
                 std::span<const Sequence> sequences, const EvalOptions& opts);

struct ExperimentReport {
    /// Rows off, dense, rerank, bm25 in that order.
    PplSummary summary;
    /// Records of each retrieval mode, ppl_off shared across modes.
    std::vector<EvalRecord> dense_records;
    std::vector<EvalRecord> rerank_records;
    std::vector<EvalRecord> bm25_records;
};

/// One checkpoint, four evaluation passes. Throws before evaluating anything
/// when either index is missing.
ExperimentReport pipeline_experiment(const lm::ModelConfig& cfg, const lm::Params<float>& params,
                                     const Retriever& retriever, std::span<const Sequence> sequences,
                                     const RetrievalConfig& retrieval, OverlapMetric overlap = OverlapMetric::containment,
                                     const BpbConfig& bpb_cfg = {});

/// Every chunk of the given sequences as a recall query, filtered by its document.
std::vector<RetrievalQuery> chunk_queries(std::span<const Sequence> sequences);

}  // namespace retrobm25
