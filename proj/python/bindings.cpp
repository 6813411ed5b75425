#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "retrobm25/analytics.hpp"
#include "retrobm25/bm25_index.hpp"
#include "retrobm25/dense_index.hpp"
#include "retrobm25/pipeline.hpp"
#include "retrobm25/retrieval.hpp"
#include "retrobm25/retro_lm.hpp"
#include "retrobm25/synthetic.hpp"

namespace py = pybind11;
using namespace retrobm25;

namespace {

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
    return "unknown";
}

CorpusRecord record_from_dict(const py::dict& d) {
    CorpusRecord r;
    r.id = py::str(d["id"]);
    if (d.contains("text") && !d["text"].is_none()) r.text = d["text"].cast<std::string>();
    if (d.contains("tokens") && !d["tokens"].is_none()) r.tokens = d["tokens"].cast<std::vector<TokenId>>();
    if (d.contains("split") && !d["split"].is_none()) r.split = d["split"].cast<std::string>();
    return r;
}

py::dict record_to_dict(const CorpusRecord& r) {
    py::dict d;
    d["id"] = r.id;
    if (r.text) d["text"] = *r.text;
    if (r.tokens) d["tokens"] = *r.tokens;
    d["split"] = r.split;
    return d;
}

// Owns a corpus and its indices so the retriever's views stay valid.
class Corpus {
  public:
    Corpus(const std::vector<py::dict>& records, std::size_t chunk_size, std::size_t vocab_size) {
        std::vector<CorpusRecord> recs;
        recs.reserve(records.size());
        for (const auto& d : records) recs.push_back(record_from_dict(d));
        data_ = std::make_unique<IngestedCorpus>(ingest_records(recs, chunk_size, vocab_size));
        rebuild_retriever();
    }

    std::size_t num_chunks() const { return data_->store.size(); }
    std::size_t num_documents() const { return data_->store.num_documents(); }
    std::size_t vocab_size() const { return data_->vocab.size(); }
    std::size_t chunk_size() const { return data_->store.chunk_size(); }

    std::vector<TokenId> tokenize(const std::string& text) const { return retrobm25::tokenize(text, data_->vocab); }
    std::vector<TokenId> chunk_tokens(ChunkId id) const {
        auto t = data_->store.tokens(id);
        return {t.begin(), t.end()};
    }
    std::string doc_id(ChunkId id) const { return data_->store.doc_id(id); }
    std::string split_of(const std::string& doc) const {
        auto idx = data_->store.find_document(doc);
        if (!idx) throw Error(ErrorCode::invalid_argument, "unknown document: " + doc);
        return data_->splits.at(*idx);
    }

    void build_bm25(double k1, double b) {
        bm25_ = std::make_unique<InvertedIndex>(InvertedIndex::build(data_->store, BM25Params{k1, b}));
        rebuild_retriever();
    }

    void build_dense(std::size_t dim, std::uint64_t seed, std::size_t nlist) {
        matrix_ = std::make_unique<EmbeddingMatrix>(embed_store_hashed(data_->store, dim, seed));
        if (nlist == 0) nlist = std::max<std::size_t>(1, std::lround(std::sqrt(static_cast<double>(matrix_->rows()))));
        ivf_ = std::make_unique<IVFIndex>(IVFIndex::build(*matrix_, nlist, seed));
        embedder_ = HashedEmbedder{dim, seed};
        rebuild_retriever();
    }

    void restrict_to_split(const std::string& split) {
        restriction_ = split;
        rebuild_retriever();
    }

    std::vector<std::pair<ChunkId, double>> bm25_topk(const std::string& text, std::size_t k) const {
        if (!bm25_) throw Error(ErrorCode::missing_index, "bm25 index not built");
        auto terms = tokenize(text);
        std::vector<std::pair<ChunkId, double>> out;
        for (const auto& s : bm25_->topk(terms, k)) out.emplace_back(s.chunk_id, s.score);
        return out;
    }

    py::list retrieve(std::optional<ChunkId> chunk_id, std::optional<std::string> text, const std::string& mode,
                      std::size_t k, std::size_t candidate_k, std::size_t nprobe, bool exact) const {
        if (chunk_id.has_value() == text.has_value()) {
            throw Error(ErrorCode::invalid_argument, "give exactly one of chunk_id or text");
        }
        std::vector<TokenId> tokens;
        RetrievalQuery q;
        if (chunk_id) {
            tokens = chunk_tokens(*chunk_id);
            q.chunk_id = *chunk_id;
            q.doc_id = data_->store.doc_id(*chunk_id);
        } else {
            tokens = tokenize(*text);
        }
        q.tokens = tokens;
        RetrievalConfig cfg;
        cfg.mode = parse_retrieval_mode(mode);
        cfg.k = k;
        cfg.candidate_k = candidate_k;
        cfg.nprobe = nprobe;
        cfg.exact_dense = exact;
        auto result = retriever_->retrieve(q, cfg);
        py::list out;
        for (const auto& n : result.neighbors) {
            py::dict d;
            d["chunk_id"] = n.neighbor.chunk_id;
            d["doc_id"] = n.neighbor.doc_id;
            d["score"] = n.score;
            d["continuation_id"] = n.continuation.chunk_id == kNoChunk ? py::object(py::none())
                                                                       : py::object(py::int_(n.continuation.chunk_id));
            out.append(std::move(d));
        }
        return out;
    }

  private:
    void rebuild_retriever() {
        retriever_ = std::make_unique<Retriever>(data_->store);
        if (bm25_) retriever_->with_bm25(*bm25_);
        if (matrix_) retriever_->with_dense(*matrix_, ivf_.get(), embedder_);
        if (restriction_ != "all") retriever_->restrict_to(split_mask(data_->store, data_->splits, restriction_));
    }

    std::unique_ptr<IngestedCorpus> data_;
    std::unique_ptr<InvertedIndex> bm25_;
    std::unique_ptr<EmbeddingMatrix> matrix_;
    std::unique_ptr<IVFIndex> ivf_;
    std::optional<HashedEmbedder> embedder_;
    std::unique_ptr<Retriever> retriever_;
    std::string restriction_ = "all";
};

lm::ModelConfig config_from_kwargs(const py::kwargs& kw) {
    lm::ModelConfig c;
    for (auto [key, value] : kw) {
        auto k = key.cast<std::string>();
        if (k == "vocab_size") c.vocab_size = value.cast<std::size_t>();
        else if (k == "d_model") c.d_model = value.cast<std::size_t>();
        else if (k == "n_heads") c.n_heads = value.cast<std::size_t>();
        else if (k == "n_decoder_layers") c.n_decoder_layers = value.cast<std::size_t>();
        else if (k == "n_encoder_layers") c.n_encoder_layers = value.cast<std::size_t>();
        else if (k == "cca_layers") c.cca_layers = value.cast<std::vector<std::size_t>>();
        else if (k == "chunk_size") c.chunk_size = value.cast<std::size_t>();
        else if (k == "neighbors") c.neighbors = value.cast<std::size_t>();
        else if (k == "max_seq_len") c.max_seq_len = value.cast<std::size_t>();
        else if (k == "rel_buckets") c.rel_buckets = value.cast<std::size_t>();
        else if (k == "d_ff") c.d_ff = value.cast<std::size_t>();
        else if (k == "seed") c.seed = value.cast<std::uint64_t>();
        else throw Error(ErrorCode::invalid_argument, "unknown model option: " + k);
    }
    c.validate();
    return c;
}

lm::RetrievalSwitch parse_switch(const std::string& s) {
    if (s == "on") return lm::RetrievalSwitch::on;
    if (s == "off") return lm::RetrievalSwitch::off;
    throw Error(ErrorCode::invalid_argument, "retrieval must be 'on' or 'off', got '" + s + "'");
}

class Model {
  public:
    explicit Model(const lm::ModelConfig& cfg) : cfg_(cfg), params_(lm::Params<float>::initialize(cfg, cfg.seed)) {}
    Model(lm::ModelConfig cfg, lm::Params<float> params) : cfg_(std::move(cfg)), params_(std::move(params)) {}

    static Model load(const std::string& path) {
        auto [cfg, params] = lm::load_checkpoint(path);
        return Model(std::move(cfg), std::move(params));
    }
    void save(const std::string& path) const { lm::save_checkpoint(path, cfg_, params_); }

    std::string config_text() const { return cfg_.to_text(); }
    std::size_t num_parameters() const { return params_.count(); }

    py::array_t<float> forward(const std::vector<TokenId>& tokens, const lm::NeighborTokens& rets,
                               const std::string& retrieval) const {
        auto probs = lm::forward<float>(cfg_, params_, tokens, rets, parse_switch(retrieval));
        py::array_t<float> out({probs.rows(), probs.cols()});
        std::copy(probs.data(), probs.data() + probs.size(), out.mutable_data());
        return out;
    }

    double loss(const std::vector<TokenId>& tokens, const lm::NeighborTokens& rets, const std::string& retrieval) const {
        return lm::loss_and_gradient<float>(cfg_, params_, tokens, rets, parse_switch(retrieval), nullptr);
    }

    std::vector<double> train(const std::vector<std::vector<TokenId>>& sequences,
                              const std::vector<lm::NeighborTokens>& rets, std::size_t steps, double lr,
                              const std::string& retrieval, std::uint64_t seed, double grad_clip,
                              std::size_t warmup_steps) {
        if (!rets.empty() && rets.size() != sequences.size()) {
            throw Error(ErrorCode::size_mismatch, "rets must be empty or one entry per sequence");
        }
        std::vector<lm::TrainingSequence> data(sequences.size());
        for (std::size_t i = 0; i < sequences.size(); ++i) {
            data[i].id = std::to_string(i);
            data[i].tokens = sequences[i];
            if (!rets.empty()) data[i].rets = rets[i];
        }
        lm::TrainConfig tc;
        tc.steps = steps;
        tc.lr = lr;
        tc.retrieval = parse_switch(retrieval);
        tc.seed = seed;
        tc.grad_clip = grad_clip;
        tc.warmup_steps = warmup_steps;
        py::gil_scoped_release release;
        return lm::train(cfg_, params_, data, tc).losses;
    }

  private:
    lm::ModelConfig cfg_;
    lm::Params<float> params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Retrieval-augmented toy language model with BM25 and dense retrieval";

    static py::exception<Error> error_type(m, "RetroError", PyExc_ValueError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object cls = py::reinterpret_borrow<py::object>(error_type.ptr());
            py::object exc = cls(e.what());
            exc.attr("code") = error_code_name(e.code());
            PyErr_SetObject(error_type.ptr(), exc.ptr());
        }
    });

    m.attr("PAD") = kPad;
    m.attr("UNK") = kUnk;

    py::class_<Corpus>(m, "Corpus")
        .def(py::init<const std::vector<py::dict>&, std::size_t, std::size_t>(), py::arg("records"),
             py::arg("chunk_size") = 64, py::arg("vocab_size") = 32000)
        .def_property_readonly("num_chunks", &Corpus::num_chunks)
        .def_property_readonly("num_documents", &Corpus::num_documents)
        .def_property_readonly("vocab_size", &Corpus::vocab_size)
        .def_property_readonly("chunk_size", &Corpus::chunk_size)
        .def("tokenize", &Corpus::tokenize, py::arg("text"))
        .def("chunk_tokens", &Corpus::chunk_tokens, py::arg("chunk_id"))
        .def("doc_id", &Corpus::doc_id, py::arg("chunk_id"))
        .def("split_of", &Corpus::split_of, py::arg("doc_id"))
        .def("build_bm25", &Corpus::build_bm25, py::arg("k1") = 0.9, py::arg("b") = 0.4)
        .def("build_dense", &Corpus::build_dense, py::arg("dim") = 64, py::arg("seed") = 0, py::arg("nlist") = 0)
        .def("restrict_to_split", &Corpus::restrict_to_split, py::arg("split"))
        .def("bm25_topk", &Corpus::bm25_topk, py::arg("text"), py::arg("k") = 10)
        .def("retrieve", &Corpus::retrieve, py::kw_only(), py::arg("chunk_id") = py::none(),
             py::arg("text") = py::none(), py::arg("mode") = "bm25", py::arg("k") = 2, py::arg("candidate_k") = 1000,
             py::arg("nprobe") = 8, py::arg("exact") = false);

    py::class_<Model>(m, "Model")
        .def(py::init([](const py::kwargs& kw) { return Model(config_from_kwargs(kw)); }))
        .def_static("load", &Model::load, py::arg("path"))
        .def("save", &Model::save, py::arg("path"))
        .def_property_readonly("config", &Model::config_text)
        .def_property_readonly("num_parameters", &Model::num_parameters)
        .def("forward", &Model::forward, py::arg("tokens"), py::arg("rets") = lm::NeighborTokens{},
             py::arg("retrieval") = "on")
        .def("loss", &Model::loss, py::arg("tokens"), py::arg("rets") = lm::NeighborTokens{},
             py::arg("retrieval") = "on")
        .def("train", &Model::train, py::arg("sequences"), py::arg("rets") = std::vector<lm::NeighborTokens>{},
             py::arg("steps") = 200, py::arg("lr") = 1e-4, py::arg("retrieval") = "on", py::arg("seed") = 0,
             py::arg("grad_clip") = 0.0, py::arg("warmup_steps") = 0);

    m.def(
        "chunk_perplexity",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> probs, const std::vector<TokenId>& tokens,
           std::size_t chunk_size, std::size_t u) {
            if (probs.ndim() != 2) throw Error(ErrorCode::invalid_argument, "probs must be 2-D");
            lm::Mat<float> p = Eigen::Map<const lm::Mat<float>>(probs.data(), probs.shape(0), probs.shape(1));
            return lm::chunk_perplexity<float>(p, tokens, chunk_size, u);
        },
        py::arg("probs"), py::arg("tokens"), py::arg("chunk_size"), py::arg("u"));

    m.def(
        "gradient_check",
        [](std::uint64_t seed, const std::string& retrieval, const py::kwargs& kw) {
            auto r = lm::gradient_check(config_from_kwargs(kw), seed, parse_switch(retrieval), 0);
            return py::dict(py::arg("max_rel_error") = r.max_rel_error, py::arg("worst_tensor") = r.worst_tensor,
                            py::arg("checked") = r.checked, py::arg("max_cca_grad") = r.max_cca_grad);
        },
        py::arg("check_seed") = 0, py::arg("retrieval") = "on");

    m.def(
        "embed_hashed",
        [](const std::vector<TokenId>& tokens, std::size_t dim, std::uint64_t seed) {
            return embed_hashed(tokens, dim, seed);
        },
        py::arg("tokens"), py::arg("dim"), py::arg("seed") = 0);

    m.def(
        "unigram_overlap",
        [](const std::vector<TokenId>& query, const std::vector<TokenId>& pair, const std::string& metric) {
            return unigram_overlap(query, pair, parse_overlap_metric(metric));
        },
        py::arg("query"), py::arg("pair"), py::arg("metric") = "containment");
    m.def(
        "pearson", [](const std::vector<double>& x, const std::vector<double>& y) { return pearson(x, y); },
        py::arg("x"), py::arg("y"));
    m.def(
        "spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); },
        py::arg("x"), py::arg("y"));
    m.def(
        "bpb", [](double loss, double ratio) { return bpb(loss, BpbConfig{ratio}); }, py::arg("loss_nats_per_token"),
        py::arg("token_byte_ratio") = BpbConfig{}.token_byte_ratio);
    m.def("reduction_fraction", &reduction_fraction, py::arg("ppl_base"), py::arg("ppl_new"));
    m.def("rerank_gain_fraction", &rerank_gain_fraction, py::arg("ppl_dense"), py::arg("ppl_rerank"),
          py::arg("ppl_bm25"));

    m.def(
        "make_copy_corpus",
        [](std::size_t pairs, std::size_t eval_pairs, double substitution, double zipf_exponent, std::uint64_t seed) {
            CopyCorpusConfig c;
            c.pairs = pairs;
            c.eval_pairs = eval_pairs;
            c.substitution = substitution;
            c.zipf_exponent = zipf_exponent;
            c.seed = seed;
            py::list out;
            for (const auto& r : make_copy_corpus(c)) out.append(record_to_dict(r));
            return out;
        },
        py::arg("pairs") = 150, py::arg("eval_pairs") = 30, py::arg("substitution") = 0.1,
        py::arg("zipf_exponent") = 1.0, py::arg("seed") = 7);
}
