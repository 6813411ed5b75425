#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retrobm25/common.hpp"

namespace retrobm25 {

enum class OverlapMetric {
    /// |Q ∩ P| / |Q| over unique non-PAD tokens.
    containment,
    /// |Q ∩ P| / |Q ∪ P|.
    jaccard,
};

OverlapMetric parse_overlap_metric(std::string_view name);

/// Unigram overlap between a query chunk and a neighbor pair [N; F].
/// Throws when the query has no non-PAD token.
double unigram_overlap(std::span<const TokenId> query, std::span<const TokenId> pair,
                       OverlapMetric metric = OverlapMetric::containment);

/// Sample Pearson correlation. Requires equal lengths >= 3 and non-constant inputs.
double pearson(std::span<const double> xs, std::span<const double> ys);

/// 1-based average ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation of average ranks.
double spearman(std::span<const double> xs, std::span<const double> ys);

struct BpbConfig {
    /// Tokens per UTF-8 byte of the evaluation text.
    double token_byte_ratio = 0.258415;
};

/// Bits per byte from mean loss in nats per token.
double bpb(double loss_nats_per_token, const BpbConfig& cfg = {});

/// (base - new) / base; positive when perplexity went down.
double reduction_fraction(double ppl_base, double ppl_new);

/// Share of the dense-to-BM25 perplexity drop recovered by reranking.
double rerank_gain_fraction(double ppl_dense, double ppl_rerank, double ppl_bm25);

/// Per-chunk evaluation row (chunk index u >= 2 within its sequence).
struct EvalRecord {
    std::string sequence_id;
    std::size_t chunk_index = 0;
    std::optional<double> ppl_on;
    std::optional<double> ppl_off;
    /// Retrieval score of the top-1 neighbor of RET(C_{u-1}).
    std::optional<double> neighbor_score;
    /// -||DR(C_u) - DR(N_1)||^2 for the top-1 neighbor N_1 of RET(C_{u-1}).
    std::optional<double> neg_sq_l2;
    /// unigram_overlap(C_u, [N_1; F_1]).
    std::optional<double> overlap;
    std::string retrieval_mode;

    std::optional<double> delta_ppl() const {
        if (ppl_on && ppl_off) return *ppl_off - *ppl_on;
        return std::nullopt;
    }
};

struct CorrelationRow {
    std::string x;
    std::string y;
    double spearman = 0.0;
    double pearson = 0.0;
    std::size_t n = 0;
};

struct CorrelationReport {
    std::vector<CorrelationRow> rows;

    /// Tab-separated with header "X\tY\tspearman\tpearson\tn".
    std::string to_tsv() const;
};

/// Three rows: (neg_sq_l2, delta_ppl), (overlap, delta_ppl), (neg_sq_l2, overlap).
/// Records missing any of those fields are skipped; fewer than 3 usable rows throws.
CorrelationReport correlation_study(std::span<const EvalRecord> records);

/// One row of a perplexity summary; BPB is derived from the same mean loss.
struct PplRow {
    std::string name;
    double ppl = 0.0;
    double bpb = 0.0;
};

/// Table of rows plus the derived reduction fractions. Rows named "off",
/// "dense", "rerank" and "bm25" enable the corresponding fractions.
struct PplSummary {
    std::vector<PplRow> rows;
    std::optional<double> dense_vs_off;
    std::optional<double> bm25_vs_dense;
    std::optional<double> rerank_gain;

    std::string to_tsv() const;
};

PplSummary summarize_ppl(std::span<const std::pair<std::string, double>> mean_ppls, const BpbConfig& cfg = {});

}  // namespace retrobm25
