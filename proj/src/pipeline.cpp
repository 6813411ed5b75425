#include "retrobm25/pipeline.hpp"

#include <cmath>
#include <sstream>

#include <fmt/core.h>

#include "retrobm25/parallel.hpp"

namespace retrobm25 {

IngestedCorpus ingest_records(std::span<const CorpusRecord> records, std::size_t chunk_size, std::size_t vocab_size) {
    if (records.empty()) throw Error(ErrorCode::empty_corpus, "empty corpus");
    if (chunk_size < 2) throw Error(ErrorCode::invalid_argument, "chunk size must be >= 2");
    std::size_t pretokenized = 0;
    for (const auto& r : records) pretokenized += r.tokens.has_value() ? 1 : 0;
    if (pretokenized != 0 && pretokenized != records.size()) {
        throw Error(ErrorCode::invalid_argument, "corpus mixes text and pre-tokenized records");
    }

    IngestedCorpus out{Vocabulary{}, ChunkStore(chunk_size), {}};
    if (pretokenized == 0) {
        std::vector<Document> docs;
        docs.reserve(records.size());
        for (const auto& r : records) docs.push_back({r.id, *r.text});
        out.vocab = build_vocabulary(docs, vocab_size);
        out.store = build_chunk_store(docs, out.vocab, chunk_size);
    } else {
        TokenId max_id = kUnk;
        for (const auto& r : records) {
            for (auto t : *r.tokens) max_id = std::max(max_id, t);
        }
        if (max_id + 1 > vocab_size) {
            throw Error(ErrorCode::invalid_argument,
                        fmt::format("token id {} does not fit vocabulary size {}", max_id, vocab_size));
        }
        std::vector<std::string> names{std::string(Vocabulary::kPadToken), std::string(Vocabulary::kUnkToken)};
        for (TokenId t = 2; t <= max_id; ++t) names.push_back(fmt::format("t{}", t));
        out.vocab = Vocabulary::from_tokens(std::move(names));
        for (const auto& r : records) out.store.add_document(r.id, *r.tokens);
    }
    out.splits.reserve(records.size());
    for (const auto& r : records) out.splits.push_back(r.split);
    return out;
}

std::string splits_to_text(const ChunkStore& store, std::span<const std::string> splits) {
    if (splits.size() != store.num_documents()) throw Error(ErrorCode::size_mismatch, "one split label per document");
    std::string out;
    for (std::size_t i = 0; i < splits.size(); ++i) out += fmt::format("{}\t{}\n", store.doc_ids()[i], splits[i]);
    return out;
}

std::vector<std::string> splits_from_text(std::string_view text, const ChunkStore& store) {
    std::vector<std::string> out(store.num_documents());
    std::vector<std::uint8_t> seen(store.num_documents(), 0);
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw Error(ErrorCode::invalid_argument, "splits: expected 'doc_id<TAB>split'");
        auto idx = store.find_document(std::string_view(line).substr(0, tab));
        if (!idx) throw Error(ErrorCode::invalid_argument, fmt::format("splits: unknown document '{}'", line.substr(0, tab)));
        out[*idx] = line.substr(tab + 1);
        seen[*idx] = 1;
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
        if (!seen[i]) throw Error(ErrorCode::invalid_argument, fmt::format("splits: no label for '{}'", store.doc_ids()[i]));
    }
    return out;
}

std::vector<std::uint8_t> split_mask(const ChunkStore& store, std::span<const std::string> splits,
                                     std::string_view split) {
    if (splits.size() != store.num_documents()) throw Error(ErrorCode::size_mismatch, "one split label per document");
    std::vector<std::uint8_t> mask(store.size(), 0);
    for (std::uint32_t d = 0; d < splits.size(); ++d) {
        if (splits[d] != split) continue;
        auto r = store.document_range(d);
        for (std::uint32_t i = 0; i < r.count; ++i) mask[r.first + i] = 1;
    }
    return mask;
}

std::vector<std::uint32_t> documents_in_split(std::span<const std::string> splits, std::string_view split) {
    std::vector<std::uint32_t> out;
    for (std::uint32_t d = 0; d < splits.size(); ++d) {
        if (splits[d] == split) out.push_back(d);
    }
    return out;
}

std::vector<Sequence> document_sequences(const ChunkStore& store, std::span<const std::uint32_t> doc_indices,
                                         std::size_t max_chunks) {
    if (max_chunks == 0) throw Error(ErrorCode::invalid_argument, "sequences need at least one chunk");
    std::vector<Sequence> out;
    for (auto d : doc_indices) {
        auto range = store.document_range(d);
        for (std::uint32_t start = 0, window = 0; start < range.count; start += static_cast<std::uint32_t>(max_chunks), ++window) {
            Sequence s;
            s.doc_id = store.doc_ids()[d];
            s.id = range.count <= max_chunks ? s.doc_id : fmt::format("{}#{}", s.doc_id, window);
            auto end = std::min<std::uint32_t>(range.count, start + static_cast<std::uint32_t>(max_chunks));
            for (auto i = start; i < end; ++i) {
                s.chunks.push_back(store.chunk(range.first + i));
                const auto& t = s.chunks.back().token_ids;
                s.tokens.insert(s.tokens.end(), t.begin(), t.end());
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<lm::TrainingSequence> prepare_training(const Retriever& retriever, std::span<const Sequence> sequences,
                                                   const RetrievalConfig& cfg, lm::RetrievalSwitch mode) {
    std::vector<lm::TrainingSequence> out(sequences.size());
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        out[i].id = sequences[i].id;
        out[i].tokens = sequences[i].tokens;
        if (mode == lm::RetrievalSwitch::on) {
            auto rets = retriever.batch_retrieve_for_sequence(sequences[i].chunks, cfg, sequences[i].doc_id);
            out[i].rets = lm::neighbor_tokens(rets);
        }
    }
    return out;
}

std::optional<double> EvalRun::ppl_on() const {
    if (targets == 0) return std::nullopt;
    return std::exp(nll_on / static_cast<double>(targets));
}

std::optional<double> EvalRun::ppl_off() const {
    if (targets == 0) return std::nullopt;
    return std::exp(nll_off / static_cast<double>(targets));
}

namespace {

struct SequenceEval {
    std::vector<EvalRecord> records;
    double nll_on = 0.0;
    double nll_off = 0.0;
    std::size_t targets = 0;
};

SequenceEval evaluate_sequence(const lm::ModelConfig& cfg, const lm::Params<float>& params,
                               const Retriever& retriever, const Sequence& seq, const EvalOptions& opts) {
    SequenceEval out;
    const std::size_t m = cfg.chunk_size;
    if (seq.chunks.empty()) return out;
    if (seq.chunks.front().token_ids.size() != m) {
        throw Error(ErrorCode::size_mismatch,
                    fmt::format("sequence '{}' has chunk size {}, model expects {}", seq.id,
                                seq.chunks.front().token_ids.size(), m));
    }
    std::vector<RetrievalResult> rets;
    lm::Mat<float> probs_on;
    lm::Mat<float> probs_off;
    if (opts.on) {
        rets = retriever.batch_retrieve_for_sequence(seq.chunks, opts.retrieval, seq.doc_id);
        probs_on = lm::forward<float>(cfg, params, seq.tokens, lm::neighbor_tokens(rets), lm::RetrievalSwitch::on);
    }
    if (opts.off) probs_off = lm::forward<float>(cfg, params, seq.tokens, {}, lm::RetrievalSwitch::off);

    const auto* matrix = retriever.dense_matrix();
    for (std::size_t u = 1; u <= seq.chunks.size(); ++u) {
        std::optional<std::pair<double, std::size_t>> on;
        std::optional<std::pair<double, std::size_t>> off;
        if (opts.on) on = lm::chunk_nll(probs_on, seq.tokens, m, u);
        if (opts.off) off = lm::chunk_nll(probs_off, seq.tokens, m, u);
        auto count = on ? on->second : off ? off->second : 0;
        if (on) out.nll_on += on->first;
        if (off) out.nll_off += off->first;
        out.targets += count;
        if (u < 2 || count == 0) continue;

        EvalRecord r;
        r.sequence_id = seq.id;
        r.chunk_index = u;
        if (on) r.ppl_on = std::exp(on->first / static_cast<double>(on->second));
        if (off) r.ppl_off = std::exp(off->first / static_cast<double>(off->second));
        if (opts.on) {
            r.retrieval_mode = std::string(to_string(opts.retrieval.mode));
            const auto& ret = rets[u - 2];
            if (!ret.neighbors.empty()) {
                const auto& top = ret.neighbors.front();
                const auto& chunk = seq.chunks[u - 1];
                r.neighbor_score = top.score;
                if (matrix && chunk.chunk_id < matrix->rows()) {
                    r.neg_sq_l2 = -squared_l2(matrix->row(chunk.chunk_id), matrix->row(top.neighbor.chunk_id));
                }
                if (chunk.length() > 0) {
                    std::vector<TokenId> pair(top.neighbor.token_ids);
                    pair.insert(pair.end(), top.continuation.token_ids.begin(), top.continuation.token_ids.end());
                    r.overlap = unigram_overlap(chunk.token_ids, pair, opts.overlap);
                }
            }
        }
        out.records.push_back(std::move(r));
    }
    return out;
}

}  // namespace

EvalRun evaluate(const lm::ModelConfig& cfg, const lm::Params<float>& params, const Retriever& retriever,
                 std::span<const Sequence> sequences, const EvalOptions& opts) {
    if (!opts.on && !opts.off) throw Error(ErrorCode::invalid_argument, "evaluate: enable retrieval on, off, or both");
    if (opts.on) opts.retrieval.validate();
    std::vector<SequenceEval> parts(sequences.size());
    parallel_for(sequences.size(),
                 [&](std::size_t i) { parts[i] = evaluate_sequence(cfg, params, retriever, sequences[i], opts); });
    EvalRun run;
    for (auto& p : parts) {
        run.nll_on += p.nll_on;
        run.nll_off += p.nll_off;
        run.targets += p.targets;
        for (auto& r : p.records) run.records.push_back(std::move(r));
    }
    return run;
}

ExperimentReport pipeline_experiment(const lm::ModelConfig& cfg, const lm::Params<float>& params,
                                     const Retriever& retriever, std::span<const Sequence> sequences,
                                     const RetrievalConfig& retrieval, OverlapMetric overlap, const BpbConfig& bpb_cfg) {
    if (!retriever.has_dense()) throw Error(ErrorCode::missing_index, "experiment needs the dense index");
    if (!retriever.has_bm25()) throw Error(ErrorCode::missing_index, "experiment needs the bm25 index");
    RetrievalConfig base = retrieval;
    base.mode = RetrievalMode::rerank;
    base.validate();

    EvalOptions off_opts;
    off_opts.on = false;
    auto off = evaluate(cfg, params, retriever, sequences, off_opts);
    if (off.targets == 0) throw Error(ErrorCode::empty_corpus, "experiment: no evaluation targets");

    ExperimentReport report;
    std::vector<std::pair<std::string, double>> rows{{"off", *off.ppl_off()}};
    for (auto mode : {RetrievalMode::dense, RetrievalMode::rerank, RetrievalMode::bm25}) {
        EvalOptions opts;
        opts.off = false;
        opts.retrieval = retrieval;
        opts.retrieval.mode = mode;
        opts.overlap = overlap;
        auto run = evaluate(cfg, params, retriever, sequences, opts);
        if (run.records.size() != off.records.size()) throw Error(ErrorCode::size_mismatch, "experiment: record mismatch");
        for (std::size_t i = 0; i < run.records.size(); ++i) run.records[i].ppl_off = off.records[i].ppl_off;
        rows.emplace_back(std::string(to_string(mode)), *run.ppl_on());
        auto& dst = mode == RetrievalMode::dense    ? report.dense_records
                    : mode == RetrievalMode::rerank ? report.rerank_records
                                                    : report.bm25_records;
        dst = std::move(run.records);
    }
    report.summary = summarize_ppl(rows, bpb_cfg);
    return report;
}

std::vector<RetrievalQuery> chunk_queries(std::span<const Sequence> sequences) {
    std::vector<RetrievalQuery> out;
    for (const auto& s : sequences) {
        for (const auto& c : s.chunks) {
            RetrievalQuery q;
            q.tokens = c.token_ids;
            q.chunk_id = c.chunk_id;
            q.doc_id = s.doc_id;
            out.push_back(std::move(q));
        }
    }
    return out;
}

}  // namespace retrobm25
