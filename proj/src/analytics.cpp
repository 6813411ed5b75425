#include "retrobm25/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/core.h>

#include "retrobm25/bm25_index.hpp"

namespace retrobm25 {

OverlapMetric parse_overlap_metric(std::string_view name) {
    if (name == "containment") return OverlapMetric::containment;
    if (name == "jaccard") return OverlapMetric::jaccard;
    throw Error(ErrorCode::invalid_argument, fmt::format("unknown overlap metric '{}'", name));
}

double unigram_overlap(std::span<const TokenId> query, std::span<const TokenId> pair, OverlapMetric metric) {
    auto q = query_terms(query);
    if (q.empty()) throw Error(ErrorCode::invalid_argument, "overlap: query chunk has no non-PAD tokens");
    auto p = query_terms(pair);
    std::vector<TokenId> common;
    std::set_intersection(q.begin(), q.end(), p.begin(), p.end(), std::back_inserter(common));
    auto inter = static_cast<double>(common.size());
    if (metric == OverlapMetric::containment) return inter / static_cast<double>(q.size());
    return inter / static_cast<double>(q.size() + p.size() - common.size());
}

namespace {

void check_pair(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) {
        throw Error(ErrorCode::invalid_argument, fmt::format("correlation: lengths differ ({} vs {})", xs.size(), ys.size()));
    }
    if (xs.size() < 3) throw Error(ErrorCode::invalid_argument, "correlation: need at least 3 samples");
}

}  // namespace

double pearson(std::span<const double> xs, std::span<const double> ys) {
    check_pair(xs, ys);
    auto n = static_cast<double>(xs.size());
    double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double dx = xs[i] - mx;
        double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::zero_variance, "zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
        // Positions i..j-1 hold ranks i+1..j.
        double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) ranks[order[t]] = avg;
        i = j;
    }
    return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
    check_pair(xs, ys);
    auto rx = average_ranks(xs);
    auto ry = average_ranks(ys);
    return pearson(rx, ry);
}

double bpb(double loss_nats_per_token, const BpbConfig& cfg) {
    if (!(cfg.token_byte_ratio > 0.0)) throw Error(ErrorCode::invalid_argument, "bpb: token/byte ratio must be > 0");
    if (loss_nats_per_token < 0.0) throw Error(ErrorCode::invalid_argument, "bpb: loss must be >= 0");
    return cfg.token_byte_ratio * loss_nats_per_token / std::numbers::ln2;
}

double reduction_fraction(double ppl_base, double ppl_new) {
    if (!(ppl_base > 0.0)) throw Error(ErrorCode::invalid_argument, "reduction_fraction: base perplexity must be > 0");
    return (ppl_base - ppl_new) / ppl_base;
}

double rerank_gain_fraction(double ppl_dense, double ppl_rerank, double ppl_bm25) {
    if (!(ppl_dense > ppl_bm25)) throw Error(ErrorCode::degenerate, "degenerate denominator");
    return (ppl_dense - ppl_rerank) / (ppl_dense - ppl_bm25);
}

std::string CorrelationReport::to_tsv() const {
    std::string out = "X\tY\tspearman\tpearson\tn\n";
    for (const auto& r : rows) out += fmt::format("{}\t{}\t{:.6f}\t{:.6f}\t{}\n", r.x, r.y, r.spearman, r.pearson, r.n);
    return out;
}

CorrelationReport correlation_study(std::span<const EvalRecord> records) {
    std::vector<double> l2;
    std::vector<double> overlap;
    std::vector<double> delta;
    for (const auto& r : records) {
        auto d = r.delta_ppl();
        if (!d || !r.neg_sq_l2 || !r.overlap) continue;
        l2.push_back(*r.neg_sq_l2);
        overlap.push_back(*r.overlap);
        delta.push_back(*d);
    }
    if (l2.size() < 3) {
        throw Error(ErrorCode::invalid_argument,
                    fmt::format("correlation study needs >= 3 complete records, got {}", l2.size()));
    }
    auto row = [](std::string x, std::string y, std::span<const double> xs, std::span<const double> ys) {
        return CorrelationRow{std::move(x), std::move(y), spearman(xs, ys), pearson(xs, ys), xs.size()};
    };
    CorrelationReport report;
    report.rows.push_back(row("neg_sq_l2", "delta_ppl", l2, delta));
    report.rows.push_back(row("overlap", "delta_ppl", overlap, delta));
    report.rows.push_back(row("neg_sq_l2", "overlap", l2, overlap));
    return report;
}

std::string PplSummary::to_tsv() const {
    std::string out = "model\tppl\tbpb\n";
    for (const auto& r : rows) out += fmt::format("{}\t{:.6f}\t{:.6f}\n", r.name, r.ppl, r.bpb);
    auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string("NA"); };
    out += fmt::format("# reduction dense_vs_off\t{}\n", opt(dense_vs_off));
    out += fmt::format("# reduction bm25_vs_dense\t{}\n", opt(bm25_vs_dense));
    out += fmt::format("# rerank_gain\t{}\n", opt(rerank_gain));
    return out;
}

PplSummary summarize_ppl(std::span<const std::pair<std::string, double>> mean_ppls, const BpbConfig& cfg) {
    PplSummary s;
    std::optional<double> off, dense, rerank, lexical;
    for (const auto& [name, ppl] : mean_ppls) {
        if (!(ppl >= 1.0) || !std::isfinite(ppl)) {
            throw Error(ErrorCode::invalid_argument, fmt::format("summary: perplexity for '{}' must be finite and >= 1", name));
        }
        s.rows.push_back({name, ppl, bpb(std::log(ppl), cfg)});
        if (name == "off") off = ppl;
        if (name == "dense") dense = ppl;
        if (name == "rerank") rerank = ppl;
        if (name == "bm25") lexical = ppl;
    }
    if (off && dense) s.dense_vs_off = reduction_fraction(*off, *dense);
    if (dense && lexical) s.bm25_vs_dense = reduction_fraction(*dense, *lexical);
    if (dense && rerank && lexical && *dense > *lexical) s.rerank_gain = rerank_gain_fraction(*dense, *rerank, *lexical);
    return s;
}

}  // namespace retrobm25
