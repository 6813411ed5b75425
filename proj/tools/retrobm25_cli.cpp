#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "retrobm25/analytics.hpp"
#include "retrobm25/binary_io.hpp"
#include "retrobm25/bm25_index.hpp"
#include "retrobm25/corpus.hpp"
#include "retrobm25/dense_index.hpp"
#include "retrobm25/pipeline.hpp"
#include "retrobm25/random.hpp"
#include "retrobm25/retrieval.hpp"
#include "retrobm25/retro_lm.hpp"
#include "retrobm25/run_config.hpp"

namespace fs = std::filesystem;
using namespace retrobm25;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUnknownCommand = 2;
constexpr int kExitConfig = 3;
constexpr int kExitMissingInput = 4;

const std::vector<std::string> kCommands{"ingest", "index-bm25", "index-dense", "search-bm25", "search-dense", "retrieve",
                                         "recall", "train",      "eval",        "correlate",   "summarize",    "selftest"};

void log(const std::string& msg) { fmt::print(stderr, "[retrobm25] {}\n", msg); }

std::string error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::empty_corpus: return "empty_corpus";
        case ErrorCode::unknown_chunk: return "unknown_chunk";
        case ErrorCode::bad_magic: return "bad_magic";
        case ErrorCode::truncated: return "truncated";
        case ErrorCode::non_finite: return "non_finite";
        case ErrorCode::size_mismatch: return "size_mismatch";
        case ErrorCode::zero_variance: return "zero_variance";
        case ErrorCode::degenerate: return "degenerate";
        case ErrorCode::missing_index: return "missing_index";
        case ErrorCode::missing_input: return "missing_input";
        case ErrorCode::diverged: return "diverged";
        case ErrorCode::io: return "io";
    }
    return "error";
}

int report_error(const std::string& kind, const std::string& message, int status) {
    nlohmann::json j{{"error", kind}, {"message", message}, {"exit", status}};
    std::cerr << j.dump() << "\n";
    return status;
}

// ---------------------------------------------------------------------------
// Options shared by several subcommands

struct Paths {
    std::string workdir = ".";
    std::string chunks, vocab, splits, bm25, dense, ivf, dense_meta, checkpoint;

    fs::path at(const std::string& explicit_path, const char* name) const {
        return explicit_path.empty() ? fs::path(workdir) / name : fs::path(explicit_path);
    }
    fs::path chunks_path() const { return at(chunks, "chunks.chk"); }
    fs::path vocab_path() const { return at(vocab, "vocab.txt"); }
    fs::path splits_path() const { return at(splits, "splits.tsv"); }
    fs::path bm25_path() const { return at(bm25, "bm25.idx"); }
    fs::path dense_path() const { return at(dense, "dense.emb"); }
    fs::path ivf_path() const { return at(ivf, "dense.ivf"); }
    fs::path dense_meta_path() const { return at(dense_meta, "dense.meta"); }
    fs::path checkpoint_path() const { return at(checkpoint, "model.ckpt"); }
};

void add_paths(CLI::App* cmd, Paths& p) {
    cmd->add_option("--workdir", p.workdir, "Directory holding the artifacts")->capture_default_str();
    cmd->add_option("--chunks", p.chunks, "Chunk store (default <workdir>/chunks.chk)");
    cmd->add_option("--vocab", p.vocab, "Vocabulary (default <workdir>/vocab.txt)");
    cmd->add_option("--splits", p.splits, "Split table (default <workdir>/splits.tsv)");
    cmd->add_option("--bm25-index", p.bm25, "BM25 index (default <workdir>/bm25.idx)");
    cmd->add_option("--dense-embeddings", p.dense, "EMB1 matrix (default <workdir>/dense.emb)");
    cmd->add_option("--dense-ivf", p.ivf, "IVF index (default <workdir>/dense.ivf)");
    cmd->add_option("--dense-meta", p.dense_meta, "Dense provider description (default <workdir>/dense.meta)");
    cmd->add_option("--checkpoint", p.checkpoint, "Model checkpoint (default <workdir>/model.ckpt)");
}

void require_file(const fs::path& p) {
    if (!fs::exists(p)) throw Error(ErrorCode::missing_input, fmt::format("missing input: {}", p.string()));
}

struct RetrievalFlags {
    std::string mode = "dense";
    std::size_t k = 2;
    std::size_t candidate_k = 1000;
    std::size_t nprobe = 8;
    bool exact = false;
    std::string retrieval_split = "train";

    RetrievalConfig config() const {
        RetrievalConfig c;
        c.mode = parse_retrieval_mode(mode);
        c.k = k;
        c.candidate_k = candidate_k;
        c.nprobe = nprobe;
        c.exact_dense = exact;
        c.validate();
        return c;
    }
};

void add_retrieval(CLI::App* cmd, RetrievalFlags& r, const char* mode_flag) {
    cmd->add_option(mode_flag, r.mode, "dense | bm25 | rerank")->capture_default_str();
    cmd->add_option("--k", r.k, "Neighbors per query")->capture_default_str();
    cmd->add_option("--candidate-K", r.candidate_k, "Dense pool size for rerank")->capture_default_str();
    cmd->add_option("--nprobe", r.nprobe, "IVF lists scanned")->capture_default_str();
    cmd->add_flag("--exact", r.exact, "Exact dense search instead of IVF");
    cmd->add_option("--retrieval-split", r.retrieval_split,
                    "Only chunks of documents in this split are retrievable ('all' disables)")
        ->capture_default_str();
}

// ---------------------------------------------------------------------------
// Loaded artifacts

struct DenseMeta {
    std::string provider = "hashed";
    std::size_t dim = 64;
    std::uint64_t seed = 0;
};

DenseMeta read_dense_meta(const fs::path& p) {
    DenseMeta m;
    auto bytes = io::read_file(p);
    for (const auto& [k, v] : parse_key_values(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()))) {
        if (k == "provider") m.provider = v;
        else if (k == "dim") m.dim = std::stoull(v);
        else if (k == "seed") m.seed = std::stoull(v);
    }
    return m;
}

std::string read_text(const fs::path& p) {
    auto bytes = io::read_file(p);
    return {bytes.begin(), bytes.end()};
}

struct Workspace {
    Vocabulary vocab;
    ChunkStore store;
    std::vector<std::string> splits;
    std::optional<InvertedIndex> bm25;
    std::optional<EmbeddingMatrix> dense;
    std::optional<IVFIndex> ivf;
    std::optional<DenseMeta> meta;
    std::vector<fs::path> inputs;

    Retriever retriever(const std::string& split) const {
        Retriever r(store);
        if (bm25) r.with_bm25(*bm25);
        if (dense) {
            std::optional<HashedEmbedder> embedder;
            if (meta && meta->provider == "hashed") embedder = HashedEmbedder{meta->dim, meta->seed};
            r.with_dense(*dense, ivf ? &*ivf : nullptr, embedder);
        }
        if (split != "all") r.restrict_to(split_mask(store, splits, split));
        return r;
    }
};

Workspace load_workspace(const Paths& p, bool need_bm25, bool need_dense) {
    Workspace w;
    require_file(p.chunks_path());
    require_file(p.vocab_path());
    w.store = ChunkStore::load(p.chunks_path());
    w.vocab = Vocabulary::from_text(read_text(p.vocab_path()));
    w.inputs = {p.chunks_path(), p.vocab_path()};
    if (fs::exists(p.splits_path())) {
        w.splits = splits_from_text(read_text(p.splits_path()), w.store);
        w.inputs.push_back(p.splits_path());
    } else {
        w.splits.assign(w.store.num_documents(), "train");
    }
    if (fs::exists(p.bm25_path())) {
        w.bm25 = InvertedIndex::load(p.bm25_path());
        w.inputs.push_back(p.bm25_path());
    } else if (need_bm25) {
        throw Error(ErrorCode::missing_index, fmt::format("bm25 index not found: {} (run index-bm25)", p.bm25_path().string()));
    }
    if (fs::exists(p.dense_path())) {
        w.dense = load_embeddings(p.dense_path(), w.store.size());
        w.inputs.push_back(p.dense_path());
        if (fs::exists(p.ivf_path())) {
            w.ivf = IVFIndex::load(p.ivf_path());
            w.inputs.push_back(p.ivf_path());
        }
        if (fs::exists(p.dense_meta_path())) {
            w.meta = read_dense_meta(p.dense_meta_path());
            w.inputs.push_back(p.dense_meta_path());
        }
    } else if (need_dense) {
        throw Error(ErrorCode::missing_index,
                    fmt::format("dense index not found: {} (run index-dense)", p.dense_path().string()));
    }
    return w;
}

struct Query {
    std::vector<TokenId> tokens;
    std::optional<ChunkId> chunk_id;
    std::optional<std::string> doc_id;
};

std::vector<Query> collect_queries(const Workspace& w, const std::optional<std::string>& text,
                                   const std::vector<ChunkId>& chunk_ids, const std::string& split,
                                   const std::optional<std::string>& exclude_doc) {
    std::vector<Query> out;
    if (text) {
        auto tokens = tokenize(*text, w.vocab);
        tokens.resize(std::max(tokens.size(), w.store.chunk_size()), kPad);
        tokens.resize(w.store.chunk_size());
        out.push_back({tokens, std::nullopt, exclude_doc});
    }
    for (auto id : chunk_ids) {
        if (id >= w.store.size()) throw Error(ErrorCode::unknown_chunk, fmt::format("unknown chunk {}", id));
        auto t = w.store.tokens(id);
        out.push_back({{t.begin(), t.end()}, id, exclude_doc ? exclude_doc : std::optional(w.store.doc_id(id))});
    }
    if (!text && chunk_ids.empty()) {
        for (auto d : documents_in_split(w.splits, split)) {
            auto r = w.store.document_range(d);
            for (std::uint32_t i = 0; i < r.count; ++i) {
                auto t = w.store.tokens(r.first + i);
                out.push_back({{t.begin(), t.end()}, r.first + i, w.store.doc_ids()[d]});
            }
        }
    }
    return out;
}

RetrievalQuery as_query(const Query& q) {
    RetrievalQuery r;
    r.tokens = q.tokens;
    r.chunk_id = q.chunk_id;
    r.doc_id = q.doc_id;
    return r;
}

nlohmann::json query_json(const Query& q) { return q.chunk_id ? nlohmann::json(*q.chunk_id) : nlohmann::json(nullptr); }

void emit(const std::string& output, const std::string& data, std::vector<fs::path>& outputs) {
    if (output.empty() || output == "-") {
        std::cout << data;
        return;
    }
    io::write_file_atomic(output, data);
    outputs.emplace_back(output);
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoull(item));
    }
    if (out.empty()) throw Error(ErrorCode::invalid_argument, fmt::format("expected a comma-separated list, got '{}'", csv));
    return out;
}

std::string record_json(const EvalRecord& r) {
    nlohmann::ordered_json j;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
    j["sequence_id"] = r.sequence_id;
    j["chunk_index"] = r.chunk_index;
    j["ppl_on"] = opt(r.ppl_on);
    j["ppl_off"] = opt(r.ppl_off);
    j["delta_ppl"] = opt(r.delta_ppl());
    j["neighbor_score"] = opt(r.neighbor_score);
    j["neg_sq_l2"] = opt(r.neg_sq_l2);
    j["overlap"] = opt(r.overlap);
    j["retrieval_mode"] = r.retrieval_mode;
    return j.dump();
}

EvalRecord record_from_json(const nlohmann::json& j) {
    EvalRecord r;
    auto opt = [&](const char* k) -> std::optional<double> {
        if (!j.contains(k) || j[k].is_null()) return std::nullopt;
        return j[k].get<double>();
    };
    r.sequence_id = j.value("sequence_id", "");
    r.chunk_index = j.value("chunk_index", std::size_t{0});
    r.ppl_on = opt("ppl_on");
    r.ppl_off = opt("ppl_off");
    r.neighbor_score = opt("neighbor_score");
    r.neg_sq_l2 = opt("neg_sq_l2");
    r.overlap = opt("overlap");
    r.retrieval_mode = j.value("retrieval_mode", "");
    return r;
}

std::string records_jsonl(const std::vector<EvalRecord>& records) {
    std::string out;
    for (const auto& r : records) out += record_json(r) + "\n";
    return out;
}

std::vector<Sequence> eval_sequences(const Workspace& w, const lm::ModelConfig& cfg, const std::string& split) {
    if (cfg.chunk_size != w.store.chunk_size()) {
        throw Error(ErrorCode::size_mismatch, fmt::format("model chunk size {} differs from the store's {}",
                                                          cfg.chunk_size, w.store.chunk_size()));
    }
    auto docs = documents_in_split(w.splits, split);
    if (docs.empty()) throw Error(ErrorCode::invalid_argument, fmt::format("no documents in split '{}'", split));
    return document_sequences(w.store, docs, cfg.max_seq_len / cfg.chunk_size);
}

// ---------------------------------------------------------------------------
// Self-test oracles

bool selftest_bm25(std::uint64_t seed) {
    Rng rng(seed);
    ChunkStore store(16);
    for (int d = 0; d < 40; ++d) {
        std::vector<TokenId> toks(8 + rng.below(40));
        for (auto& t : toks) t = static_cast<TokenId>(2 + rng.below(30));
        store.add_document(fmt::format("d{}", d), toks);
    }
    auto index = InvertedIndex::build(store);
    for (int q = 0; q < 20; ++q) {
        auto qid = static_cast<ChunkId>(rng.below(store.size()));
        auto terms = query_terms(store.tokens(qid));
        CandidateFilter f;
        f.exclude = store.document_range(store.doc_index(qid));
        std::vector<ScoredChunk> brute;
        for (ChunkId c = 0; c < store.size(); ++c) {
            if (!f.admits(c)) continue;
            double s = 0.0;
            auto tokens = query_terms(store.tokens(c));
            auto len = static_cast<double>(store.tokens(c).size() - store.pad_count(c));
            for (auto t : terms) {
                double tf = 0;
                for (auto x : store.tokens(c)) tf += x == t ? 1 : 0;
                if (tf == 0) continue;
                double n = static_cast<double>(index.doc_freq(t));
                double idf = std::log(1.0 + (static_cast<double>(store.size()) - n + 0.5) / (n + 0.5));
                s += idf * tf * 1.9 / (tf + 0.9 * (0.6 + 0.4 * len / index.avgdl()));
            }
            brute.push_back({c, s});
        }
        std::sort(brute.begin(), brute.end(), ranks_before);
        brute.resize(std::min<std::size_t>(brute.size(), 10));
        auto got = index.topk(terms, 10, f);
        if (got.size() != brute.size()) return false;
        for (std::size_t i = 0; i < got.size(); ++i) {
            if (got[i].chunk_id != brute[i].chunk_id || std::abs(got[i].score - brute[i].score) > 1e-9) return false;
        }
    }
    return true;
}

bool selftest_dense(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = 300, d = 16;
    std::vector<float> values(n * d);
    for (auto& v : values) v = static_cast<float>(rng.normal());
    EmbeddingMatrix m(n, d, values);
    for (int q = 0; q < 20; ++q) {
        std::vector<float> query(d);
        for (auto& v : query) v = static_cast<float>(rng.normal());
        std::vector<DenseHit> brute;
        for (ChunkId i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) {
                double diff = static_cast<double>(m.row(i)[j]) - static_cast<double>(query[j]);
                s += diff * diff;
            }
            brute.push_back({i, s});
        }
        std::sort(brute.begin(), brute.end(), closer);
        brute.resize(10);
        if (exact_search(m, query, SearchParams{10, 1, {}}) != brute) return false;
    }
    return true;
}

int run_selftest(std::uint64_t seed) {
    bool ok = true;
    auto line = [&](const std::string& name, bool pass, const std::string& detail) {
        ok = ok && pass;
        fmt::print("{}\t{}\t{}\n", pass ? "PASS" : "FAIL", name, detail);
    };
    line("bm25_brute_force", selftest_bm25(seed), "topk(10) vs direct formula, 20 queries");
    line("exact_search_brute_force", selftest_dense(seed), "300x16 matrix, 20 queries");
    lm::ModelConfig tiny;
    tiny.vocab_size = 20;
    tiny.d_model = 8;
    tiny.n_heads = 2;
    tiny.n_decoder_layers = 3;
    tiny.n_encoder_layers = 1;
    tiny.cca_layers = {1, 2};
    tiny.chunk_size = 4;
    tiny.neighbors = 2;
    tiny.max_seq_len = 12;
    tiny.rel_buckets = 12;
    tiny.d_ff = 16;
    auto gc = lm::gradient_check(tiny, seed, lm::RetrievalSwitch::on);
    line("gradient_check", gc.max_rel_error < 1e-5,
         fmt::format("max_rel_error={:.3e} worst={} checked={}", gc.max_rel_error, gc.worst_tensor, gc.checked));
    return ok ? 0 : kExitFailure;
}

// ---------------------------------------------------------------------------

struct ModelFlags {
    std::size_t d_model = 128, n_heads = 4, decoder_layers = 4, encoder_layers = 1, max_seq_len = 512,
                rel_buckets = 512, d_ff = 512;
    std::string cca_layers = "2,3";
};

/// Injects "key = value" lines from --config as "--key=value" ahead of the
/// real flags, so flags given on the command line win (TakeLast).
std::vector<std::string> expand_config(const std::vector<std::string>& args, CLI::App& app, const std::string& command) {
    std::optional<std::string> config_path;
    for (std::size_t i = 2; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    std::vector<std::string> out{args[0], args[1]};
    if (config_path) {
        if (!fs::exists(*config_path)) throw Error(ErrorCode::missing_input, fmt::format("missing input: {}", *config_path));
        auto* sub = app.get_subcommand(command);
        for (auto [key, value] : parse_key_values(read_text(*config_path))) {
            std::replace(key.begin(), key.end(), '_', '-');
            auto flag = "--" + key;
            if (sub->get_option_no_throw(flag) != nullptr) {
                out.push_back(flag + "=" + value);
                continue;
            }
            bool known = false;
            for (auto* other : app.get_subcommands([](CLI::App*) { return true; })) {
                known = known || other->get_option_no_throw(flag) != nullptr;
            }
            if (!known) throw CLI::ValidationError(fmt::format("config: unknown key '{}'", key));
        }
    }
    out.insert(out.end(), args.begin() + 2, args.end());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    if (args.size() < 2 || args[1] == "--help" || args[1] == "-h") {
        fmt::print("usage: retrobm25 <command> [flags]\ncommands:");
        for (const auto& c : kCommands) fmt::print(" {}", c);
        fmt::print("\n");
        return args.size() < 2 ? kExitUnknownCommand : 0;
    }
    const std::string command = args[1];
    if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) {
        return report_error("unknown_subcommand", fmt::format("unknown subcommand '{}'", command), kExitUnknownCommand);
    }

    CLI::App app{"Chunked retrieval workbench: BM25 and dense indices, RETRO-style toy LM, analysis"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);
    std::string config_file;
    Paths paths;
    Manifest manifest;
    manifest.command = command;

    auto with_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "Flat 'key = value' config file; flags override it");
        add_paths(cmd, paths);
        return cmd;
    };

    // ingest
    std::string corpus_path;
    std::size_t chunk_size = 64;
    std::size_t vocab_size = Vocabulary::kDefaultMaxSize;
    auto* ingest = with_common(app.add_subcommand("ingest", "Tokenize, build the vocabulary and chunk a JSON-lines corpus"));
    ingest->add_option("--corpus", corpus_path, "JSON-lines corpus")->required();
    ingest->add_option("--chunk-size", chunk_size, "Tokens per chunk (m)")->capture_default_str();
    ingest->add_option("--vocab-size", vocab_size, "Vocabulary cap including PAD and UNK")->capture_default_str();

    // index-bm25
    double k1 = 0.9;
    double b = 0.4;
    auto* index_bm25 = with_common(app.add_subcommand("index-bm25", "Build the BM25 inverted index"));
    index_bm25->add_option("--k1", k1)->capture_default_str();
    index_bm25->add_option("--b", b)->capture_default_str();

    // index-dense
    std::size_t dim = 64;
    std::uint64_t dense_seed = 0;
    std::size_t nlist = 0;
    std::string external_embeddings;
    auto* index_dense = with_common(app.add_subcommand("index-dense", "Embed chunks and build the IVF index"));
    index_dense->add_option("--dim", dim, "Hashed embedding dimension")->capture_default_str();
    index_dense->add_option("--dense-seed", dense_seed, "Hashing and k-means seed")->capture_default_str();
    index_dense->add_option("--nlist", nlist, "IVF lists (0 = round(sqrt(n)))")->capture_default_str();
    index_dense->add_option("--external-embeddings", external_embeddings, "EMB1 file replacing the hashed provider");

    // search-bm25 / search-dense / retrieve
    std::optional<std::string> query_text;
    std::vector<ChunkId> query_chunk_ids;
    std::optional<std::string> exclude_doc;
    std::string query_split = "eval";
    std::string output;
    RetrievalFlags rflags;
    auto add_query = [&](CLI::App* cmd) {
        cmd->add_option("--query-text", query_text, "Query text (tokenized and padded to one chunk)");
        cmd->add_option("--query-chunk-id", query_chunk_ids, "Stored chunk(s) to query with")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->add_option("--exclude-doc", exclude_doc, "Document whose chunks are never returned");
        cmd->add_option("--split", query_split, "Without explicit queries, query every chunk of this split")->capture_default_str();
        cmd->add_option("--output", output, "Output file (default stdout)");
    };
    auto* search_bm25 = with_common(app.add_subcommand("search-bm25", "BM25 top-k search"));
    add_query(search_bm25);
    search_bm25->add_option("--k", rflags.k, "Results per query")->capture_default_str();
    search_bm25->add_option("--retrieval-split", rflags.retrieval_split)->capture_default_str();
    auto* search_dense = with_common(app.add_subcommand("search-dense", "Dense squared-L2 search"));
    add_query(search_dense);
    search_dense->add_option("--k", rflags.k, "Results per query")->capture_default_str();
    search_dense->add_option("--nprobe", rflags.nprobe, "IVF lists scanned")->capture_default_str();
    search_dense->add_flag("--exact", rflags.exact, "Exact search instead of IVF");
    search_dense->add_option("--retrieval-split", rflags.retrieval_split)->capture_default_str();
    auto* retrieve = with_common(app.add_subcommand("retrieve", "RET(C) neighbor pairs under a retrieval mode"));
    add_query(retrieve);
    add_retrieval(retrieve, rflags, "--mode");

    // recall
    std::size_t k_bm25 = 4;
    std::string k_dense = "10,100,1000";
    auto* recall = with_common(app.add_subcommand("recall", "Fraction of BM25 top-k found in dense top-K"));
    recall->add_option("--k-bm25", k_bm25)->capture_default_str();
    recall->add_option("--k-dense", k_dense, "Comma-separated K values")->capture_default_str();
    recall->add_option("--nprobe", rflags.nprobe)->capture_default_str();
    recall->add_flag("--exact", rflags.exact);
    recall->add_option("--split", query_split, "Query chunks come from this split")->capture_default_str();
    recall->add_option("--retrieval-split", rflags.retrieval_split)->capture_default_str();
    recall->add_option("--output", output, "TSV output (default stdout)");

    // train
    std::string train_mode = "on";
    lm::TrainConfig tc;
    ModelFlags mf;
    std::string train_split = "train";
    auto* train = with_common(app.add_subcommand("train", "Train the toy retrieval-augmented LM"));
    train->add_option("--mode", train_mode, "on | off (retrieval during training)")->capture_default_str();
    add_retrieval(train, rflags, "--retrieval-mode");
    train->add_option("--steps", tc.steps)->capture_default_str();
    train->add_option("--lr", tc.lr)->capture_default_str();
    train->add_option("--seed", tc.seed, "Data order and initialization seed")->capture_default_str();
    train->add_option("--batch-size", tc.batch_size)->capture_default_str();
    train->add_option("--grad-clip", tc.grad_clip, "Global norm clip (0 disables)")->capture_default_str();
    train->add_option("--warmup-steps", tc.warmup_steps, "Linear learning-rate warmup (0 disables)")->capture_default_str();
    train->add_option("--d-model", mf.d_model)->capture_default_str();
    train->add_option("--n-heads", mf.n_heads)->capture_default_str();
    train->add_option("--decoder-layers", mf.decoder_layers)->capture_default_str();
    train->add_option("--encoder-layers", mf.encoder_layers)->capture_default_str();
    train->add_option("--cca-layers", mf.cca_layers, "Comma-separated 0-based decoder layers")->capture_default_str();
    train->add_option("--max-seq-len", mf.max_seq_len)->capture_default_str();
    train->add_option("--rel-buckets", mf.rel_buckets)->capture_default_str();
    train->add_option("--d-ff", mf.d_ff)->capture_default_str();
    train->add_option("--train-split", train_split)->capture_default_str();

    // eval
    std::string eval_mode = "both";
    std::string overlap = "containment";
    auto* eval = with_common(app.add_subcommand("eval", "Per-chunk perplexity records with retrieval on/off"));
    eval->add_option("--mode", eval_mode, "on | off | both")->capture_default_str();
    add_retrieval(eval, rflags, "--retrieval-mode");
    eval->add_option("--overlap", overlap, "containment | jaccard")->capture_default_str();
    eval->add_option("--split", query_split, "Documents to evaluate")->capture_default_str();
    eval->add_option("--output", output, "EvalRecord JSON-lines (default stdout)");

    // correlate
    std::string records_path;
    auto* correlate = with_common(app.add_subcommand("correlate", "Correlation study over EvalRecord JSON-lines"));
    correlate->add_option("--records", records_path, "EvalRecord JSON-lines")->required();
    correlate->add_option("--output", output, "TSV output (default stdout)");

    // summarize
    std::string summary_input;
    bool experiment = false;
    double ratio = BpbConfig{}.token_byte_ratio;
    auto* summarize = with_common(app.add_subcommand("summarize", "Perplexity/BPB table with reduction fractions"));
    summarize->add_option("--input", summary_input, "TSV of 'name<TAB>mean_ppl' rows");
    summarize->add_flag("--experiment", experiment,
                        "Evaluate the checkpoint under off, dense, rerank and bm25 retrieval");
    add_retrieval(summarize, rflags, "--retrieval-mode");
    summarize->add_option("--overlap", overlap)->capture_default_str();
    summarize->add_option("--split", query_split)->capture_default_str();
    summarize->add_option("--token-byte-ratio", ratio)->capture_default_str();
    summarize->add_option("--output", output, "TSV output (default stdout)");

    // selftest
    std::uint64_t selftest_seed = 0;
    auto* selftest = app.add_subcommand("selftest", "Run the BM25, exact-search and gradient oracles");
    selftest->add_option("--seed", selftest_seed)->capture_default_str();

    try {
        auto expanded = expand_config(args, app, command);
        std::reverse(expanded.begin() + 1, expanded.end());
        app.parse(std::vector<std::string>(expanded.begin() + 1, expanded.end()));
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("config", e.what(), kExitConfig);
    } catch (const Error& e) {
        return report_error(error_code_name(e.code()), e.what(),
                            e.code() == ErrorCode::missing_input ? kExitMissingInput : kExitConfig);
    }

    try {
        auto* sub = app.get_subcommands().front();
        for (auto* opt : sub->get_options()) {
            if (opt->count() > 0 && opt->get_name() != "--help") {
                manifest.config.emplace_back(opt->get_name(), opt->as<std::string>());
            }
        }
        const fs::path workdir = paths.workdir;
        if (sub != selftest) fs::create_directories(workdir);

        if (sub == ingest) {
            require_file(corpus_path);
            std::ifstream in(corpus_path);
            auto records = read_corpus_jsonl(in);
            auto corpus = ingest_records(records, chunk_size, vocab_size);
            corpus.store.save(paths.chunks_path());
            io::write_file_atomic(paths.vocab_path(), corpus.vocab.to_text());
            io::write_file_atomic(paths.splits_path(), splits_to_text(corpus.store, corpus.splits));
            log(fmt::format("{} documents, {} chunks, vocabulary {}", corpus.store.num_documents(), corpus.store.size(),
                            corpus.vocab.size()));
            manifest.inputs = {corpus_path};
            manifest.outputs = {paths.chunks_path(), paths.vocab_path(), paths.splits_path()};
        } else if (sub == index_bm25) {
            require_file(paths.chunks_path());
            auto store = ChunkStore::load(paths.chunks_path());
            BM25Params params{k1, b};
            params.validate();
            auto index = InvertedIndex::build(store, params);
            index.save(paths.bm25_path());
            log(fmt::format("{} chunks, {} terms, avgdl {:.3f}", index.num_chunks(), index.num_terms(), index.avgdl()));
            manifest.inputs = {paths.chunks_path()};
            manifest.outputs = {paths.bm25_path()};
        } else if (sub == index_dense) {
            require_file(paths.chunks_path());
            auto store = ChunkStore::load(paths.chunks_path());
            manifest.inputs = {paths.chunks_path()};
            EmbeddingMatrix matrix;
            DenseMeta meta;
            if (!external_embeddings.empty()) {
                require_file(external_embeddings);
                matrix = load_embeddings(external_embeddings, store.size());
                meta = {"external", matrix.dim(), dense_seed};
                manifest.inputs.emplace_back(external_embeddings);
            } else {
                matrix = embed_store_hashed(store, dim, dense_seed);
                meta = {"hashed", dim, dense_seed};
            }
            if (nlist == 0) {
                nlist = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(store.size())))));
            }
            auto ivf = IVFIndex::build(matrix, nlist, dense_seed);
            matrix.save(paths.dense_path());
            ivf.save(paths.ivf_path());
            io::write_file_atomic(paths.dense_meta_path(),
                                  fmt::format("provider = {}\ndim = {}\nseed = {}\n", meta.provider, meta.dim, meta.seed));
            log(fmt::format("{} x {} matrix, {} IVF lists", matrix.rows(), matrix.dim(), ivf.nlist()));
            manifest.outputs = {paths.dense_path(), paths.ivf_path(), paths.dense_meta_path()};
        } else if (sub == search_bm25 || sub == search_dense || sub == retrieve) {
            const bool lexical = sub == search_bm25;
            const bool dense_only = sub == search_dense;
            auto cfg = sub == retrieve ? rflags.config() : RetrievalConfig{};
            cfg.k = rflags.k;
            cfg.nprobe = rflags.nprobe;
            cfg.exact_dense = rflags.exact;
            const bool need_bm25 = lexical || (sub == retrieve && cfg.mode != RetrievalMode::dense);
            const bool need_dense = dense_only || (sub == retrieve && cfg.mode != RetrievalMode::bm25);
            auto w = load_workspace(paths, need_bm25, need_dense);
            manifest.inputs = w.inputs;
            auto retriever = w.retriever(rflags.retrieval_split);
            auto queries = collect_queries(w, query_text, query_chunk_ids, query_split, exclude_doc);
            std::string out;
            for (const auto& q : queries) {
                auto rq = as_query(q);
                nlohmann::ordered_json line;
                line["query_chunk"] = query_json(q);
                auto& list = line[sub == retrieve ? "neighbors" : "results"] = nlohmann::ordered_json::array();
                if (lexical) {
                    for (const auto& h : retriever.bm25_search(rq, cfg.k)) {
                        list.push_back({{"chunk_id", h.chunk_id}, {"score", h.score}, {"doc_id", w.store.doc_id(h.chunk_id)}});
                    }
                } else if (dense_only) {
                    for (const auto& h : retriever.dense_search(rq, cfg.k, cfg)) {
                        list.push_back({{"chunk_id", h.chunk_id}, {"sq_l2", h.sq_l2}, {"doc_id", w.store.doc_id(h.chunk_id)}});
                    }
                } else {
                    for (const auto& n : retriever.retrieve(rq, cfg).neighbors) {
                        list.push_back({{"chunk_id", n.neighbor.chunk_id},
                                        {"score", n.score},
                                        {"doc_id", n.neighbor.doc_id},
                                        {"continuation_id", n.continuation.chunk_id == kNoChunk
                                                                ? nlohmann::ordered_json(nullptr)
                                                                : nlohmann::ordered_json(n.continuation.chunk_id)}});
                    }
                }
                out += line.dump() + "\n";
            }
            emit(output, out, manifest.outputs);
        } else if (sub == recall) {
            auto w = load_workspace(paths, true, true);
            manifest.inputs = w.inputs;
            auto retriever = w.retriever(rflags.retrieval_split);
            auto queries = collect_queries(w, std::nullopt, {}, query_split, std::nullopt);
            std::vector<RetrievalQuery> rqs;
            for (const auto& q : queries) rqs.push_back(as_query(q));
            auto ks = parse_sizes(k_dense);
            RetrievalConfig cfg;
            cfg.nprobe = rflags.nprobe;
            cfg.exact_dense = rflags.exact;
            auto values = retriever.recall_of_bm25_in_dense(rqs, k_bm25, ks, cfg);
            std::string out = "K_dense\trecall\n";
            for (std::size_t i = 0; i < ks.size(); ++i) out += fmt::format("{}\t{:.6f}\n", ks[i], values[i]);
            emit(output, out, manifest.outputs);
        } else if (sub == train) {
            auto mode = train_mode == "on" ? lm::RetrievalSwitch::on : train_mode == "off" ? lm::RetrievalSwitch::off
                        : throw Error(ErrorCode::invalid_argument, fmt::format("--mode must be on or off, got '{}'", train_mode));
            auto rcfg = rflags.config();
            auto w = load_workspace(paths, mode == lm::RetrievalSwitch::on && rcfg.mode != RetrievalMode::dense,
                                    mode == lm::RetrievalSwitch::on && rcfg.mode != RetrievalMode::bm25);
            manifest.inputs = w.inputs;
            lm::ModelConfig mc;
            mc.vocab_size = w.vocab.size();
            mc.d_model = mf.d_model;
            mc.n_heads = mf.n_heads;
            mc.n_decoder_layers = mf.decoder_layers;
            mc.n_encoder_layers = mf.encoder_layers;
            mc.cca_layers = parse_sizes(mf.cca_layers);
            mc.chunk_size = w.store.chunk_size();
            mc.neighbors = rcfg.k;
            mc.max_seq_len = mf.max_seq_len;
            mc.rel_buckets = mf.rel_buckets;
            mc.d_ff = mf.d_ff;
            mc.seed = tc.seed;
            mc.validate();
            tc.retrieval = mode;
            auto docs = documents_in_split(w.splits, train_split);
            if (docs.empty()) throw Error(ErrorCode::empty_corpus, fmt::format("no documents in split '{}'", train_split));
            auto sequences = document_sequences(w.store, docs, mc.max_seq_len / mc.chunk_size);
            auto retriever = w.retriever(rflags.retrieval_split);
            auto data = prepare_training(retriever, sequences, rcfg, mode);
            auto params = lm::Params<float>::initialize(mc, tc.seed);
            log(fmt::format("{} sequences, {} parameters", data.size(), params.count()));
            double window = 0.0;
            auto result = lm::train(mc, params, data, tc, [&](std::size_t step, double loss) {
                window += loss;
                if (step % 50 == 0) {
                    log(fmt::format("step {} loss {:.4f}", step, window / 50.0));
                    window = 0.0;
                }
            });
            lm::save_checkpoint(paths.checkpoint_path(), mc, params);
            std::string curve = "step\tloss\n";
            for (std::size_t i = 0; i < result.losses.size(); ++i) curve += fmt::format("{}\t{:.6f}\n", i + 1, result.losses[i]);
            io::write_file_atomic(workdir / "train_loss.tsv", curve);
            manifest.outputs = {paths.checkpoint_path(), workdir / "train_loss.tsv"};
        } else if (sub == eval) {
            EvalOptions opts;
            opts.on = eval_mode == "on" || eval_mode == "both";
            opts.off = eval_mode == "off" || eval_mode == "both";
            if (!opts.on && !opts.off) throw Error(ErrorCode::invalid_argument, "--mode must be on, off or both");
            opts.retrieval = rflags.config();
            opts.overlap = parse_overlap_metric(overlap);
            require_file(paths.checkpoint_path());
            auto w = load_workspace(paths, opts.on && opts.retrieval.mode != RetrievalMode::dense,
                                    opts.on && opts.retrieval.mode != RetrievalMode::bm25);
            auto [mc, params] = lm::load_checkpoint(paths.checkpoint_path());
            manifest.inputs = w.inputs;
            manifest.inputs.push_back(paths.checkpoint_path());
            auto retriever = w.retriever(rflags.retrieval_split);
            auto sequences = eval_sequences(w, mc, query_split);
            auto run = evaluate(mc, params, retriever, sequences, opts);
            if (auto p = run.ppl_on()) log(fmt::format("corpus ppl on ({}): {:.4f}", rflags.mode, *p));
            if (opts.off) log(fmt::format("corpus ppl off: {:.4f}", *run.ppl_off()));
            emit(output, records_jsonl(run.records), manifest.outputs);
        } else if (sub == correlate) {
            require_file(records_path);
            std::ifstream in(records_path);
            std::vector<EvalRecord> records;
            std::string line;
            std::size_t line_no = 0;
            while (std::getline(in, line)) {
                ++line_no;
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                try {
                    records.push_back(record_from_json(nlohmann::json::parse(line)));
                } catch (const nlohmann::json::exception& e) {
                    throw Error(ErrorCode::invalid_argument, fmt::format("{} line {}: {}", records_path, line_no, e.what()));
                }
            }
            manifest.inputs = {records_path};
            emit(output, correlation_study(records).to_tsv(), manifest.outputs);
        } else if (sub == summarize) {
            BpbConfig bpb_cfg{ratio};
            PplSummary summary;
            if (experiment) {
                require_file(paths.checkpoint_path());
                auto w = load_workspace(paths, true, true);
                auto [mc, params] = lm::load_checkpoint(paths.checkpoint_path());
                manifest.inputs = w.inputs;
                manifest.inputs.push_back(paths.checkpoint_path());
                auto retriever = w.retriever(rflags.retrieval_split);
                auto sequences = eval_sequences(w, mc, query_split);
                auto cfg = rflags.config();
                auto report = pipeline_experiment(mc, params, retriever, sequences, cfg, parse_overlap_metric(overlap), bpb_cfg);
                for (const auto& [name, recs] : {std::pair{"dense", &report.dense_records},
                                                 std::pair{"rerank", &report.rerank_records},
                                                 std::pair{"bm25", &report.bm25_records}}) {
                    auto p = workdir / fmt::format("records_{}.jsonl", name);
                    io::write_file_atomic(p, records_jsonl(*recs));
                    manifest.outputs.push_back(p);
                }
                summary = report.summary;
            } else {
                if (summary_input.empty()) throw Error(ErrorCode::invalid_argument, "summarize needs --input or --experiment");
                require_file(summary_input);
                std::vector<std::pair<std::string, double>> rows;
                std::istringstream in(read_text(summary_input));
                std::string line;
                while (std::getline(in, line)) {
                    if (line.empty() || line[0] == '#') continue;
                    auto tab = line.find('\t');
                    if (tab == std::string::npos) throw Error(ErrorCode::invalid_argument, "summary input: expected 'name<TAB>ppl'");
                    rows.emplace_back(line.substr(0, tab), std::stod(line.substr(tab + 1)));
                }
                manifest.inputs = {summary_input};
                summary = summarize_ppl(rows, bpb_cfg);
            }
            emit(output, summary.to_tsv(), manifest.outputs);
        } else if (sub == selftest) {
            return run_selftest(selftest_seed);
        }
        manifest.write(workdir);
        return 0;
    } catch (const Error& e) {
        int status = e.code() == ErrorCode::missing_input ? kExitMissingInput : kExitFailure;
        return report_error(error_code_name(e.code()), e.what(), status);
    } catch (const std::exception& e) {
        return report_error("internal", e.what(), kExitFailure);
    }
}
