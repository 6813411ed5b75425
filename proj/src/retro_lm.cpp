#include "retrobm25/retro_lm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <fmt/core.h>

#include "retrobm25/random.hpp"

namespace retrobm25::lm {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_argument, "model config: " + msg); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be a positive multiple of n_heads");
    if (chunk_size < 2) fail("chunk_size must be >= 2");
    if (max_seq_len == 0 || max_seq_len % chunk_size != 0) fail("chunk_size must divide max_seq_len");
    if (rel_buckets == 0) fail("rel_buckets must be >= 1");
    if (d_ff == 0) fail("d_ff must be >= 1");
    for (auto l : cca_layers) {
        if (l >= n_decoder_layers) fail(fmt::format("cca layer {} outside decoder depth {}", l, n_decoder_layers));
    }
}

bool ModelConfig::has_cca(std::size_t layer) const {
    return std::find(cca_layers.begin(), cca_layers.end(), layer) != cca_layers.end();
}

std::size_t ModelConfig::encoder_bias_radius() const { return std::min(rel_buckets, 2 * chunk_size); }

std::size_t ModelConfig::decoder_bias_radius() const { return std::min(rel_buckets, max_seq_len); }

std::string ModelConfig::to_text() const {
    std::string layers;
    for (std::size_t i = 0; i < cca_layers.size(); ++i) layers += (i ? "," : "") + std::to_string(cca_layers[i]);
    return fmt::format(
        "vocab_size = {}\nd_model = {}\nn_heads = {}\nn_decoder_layers = {}\nn_encoder_layers = {}\n"
        "cca_layers = {}\nchunk_size = {}\nneighbors = {}\nmax_seq_len = {}\nrel_buckets = {}\nd_ff = {}\nseed = {}\n",
        vocab_size, d_model, n_heads, n_decoder_layers, n_encoder_layers, layers, chunk_size, neighbors, max_seq_len,
        rel_buckets, d_ff, seed);
}

ModelConfig ModelConfig::from_text(std::string_view text) {
    ModelConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        auto num = [&] { return static_cast<std::size_t>(std::stoull(value)); };
        if (key == "vocab_size") cfg.vocab_size = num();
        else if (key == "d_model") cfg.d_model = num();
        else if (key == "n_heads") cfg.n_heads = num();
        else if (key == "n_decoder_layers") cfg.n_decoder_layers = num();
        else if (key == "n_encoder_layers") cfg.n_encoder_layers = num();
        else if (key == "chunk_size") cfg.chunk_size = num();
        else if (key == "neighbors") cfg.neighbors = num();
        else if (key == "max_seq_len") cfg.max_seq_len = num();
        else if (key == "rel_buckets") cfg.rel_buckets = num();
        else if (key == "d_ff") cfg.d_ff = num();
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "cca_layers") {
            cfg.cca_layers.clear();
            std::istringstream parts(value);
            std::string p;
            while (std::getline(parts, p, ',')) {
                if (!trim(p).empty()) cfg.cca_layers.push_back(std::stoull(trim(p)));
            }
        } else {
            throw Error(ErrorCode::invalid_argument, fmt::format("model config: unknown key '{}'", key));
        }
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Params

template <typename T>
Params<T> Params<T>::zeros(const ModelConfig& cfg) {
    cfg.validate();
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto ff = static_cast<Eigen::Index>(cfg.d_ff);
    const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
    const auto h = static_cast<Eigen::Index>(cfg.n_heads);
    auto norm = [&] { return NormWeights<T>{Mat<T>::Zero(1, d), Mat<T>::Zero(1, d)}; };
    auto attn = [&] {
        return AttentionWeights<T>{Mat<T>::Zero(d, d), Mat<T>::Zero(d, d), Mat<T>::Zero(d, d), Mat<T>::Zero(d, d)};
    };
    auto ffn = [&] {
        return FeedForwardWeights<T>{Mat<T>::Zero(d, ff), Mat<T>::Zero(1, ff), Mat<T>::Zero(ff, d), Mat<T>::Zero(1, d)};
    };
    Params p;
    p.embedding = Mat<T>::Zero(v, d);
    auto enc_width = static_cast<Eigen::Index>(2 * cfg.encoder_bias_radius() - 1);
    for (std::size_t i = 0; i < cfg.n_encoder_layers; ++i) {
        p.encoder.push_back({norm(), attn(), Mat<T>::Zero(h, enc_width), norm(), ffn()});
    }
    p.enc_final = norm();
    for (std::size_t i = 0; i < cfg.n_decoder_layers; ++i) {
        DecoderLayerWeights<T> l;
        l.ln_attn = norm();
        l.attn = attn();
        l.rel_bias = Mat<T>::Zero(h, static_cast<Eigen::Index>(cfg.decoder_bias_radius()));
        l.has_cca = cfg.has_cca(i);
        if (l.has_cca) {
            l.ln_cca = norm();
            l.cca = attn();
        }
        l.ln_ffn = norm();
        l.ffn = ffn();
        p.decoder.push_back(std::move(l));
    }
    p.dec_final = norm();
    p.out_w = Mat<T>::Zero(d, v);
    p.out_b = Mat<T>::Zero(1, v);
    return p;
}

template <typename T>
Params<T> Params<T>::initialize(const ModelConfig& cfg, std::uint64_t seed) {
    auto p = zeros(cfg);
    Rng rng(seed);
    const double base = 0.02;
    const double residual = base / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_decoder_layers, 1)));
    p.visit([&](const std::string& name, Mat<T>& m) {
        auto ends_with = [&](std::string_view s) { return name.size() >= s.size() && name.ends_with(s); };
        if (ends_with(".gain")) {
            m.setOnes();
        } else if (ends_with(".bias") || ends_with(".b1") || ends_with(".b2") || ends_with("rel_bias") ||
                   name == "out.b") {
            m.setZero();
        } else {
            double scale = (ends_with(".wo") || ends_with(".w2")) ? residual : base;
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(scale * rng.normal());
        }
    });
    return p;
}

template <typename T>
std::size_t Params<T>::count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename T>
void Params<T>::set_zero() {
    visit([](const std::string&, Mat<T>& m) { m.setZero(); });
}

NeighborTokens neighbor_tokens(std::span<const RetrievalResult> rets) {
    NeighborTokens out(rets.size());
    for (std::size_t u = 0; u < rets.size(); ++u) {
        for (const auto& n : rets[u].neighbors) {
            std::vector<TokenId> pair(n.neighbor.token_ids);
            pair.insert(pair.end(), n.continuation.token_ids.begin(), n.continuation.token_ids.end());
            out[u].push_back(std::move(pair));
        }
    }
    return out;
}

namespace {

constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Layer norm

template <typename T>
struct NormCache {
    Mat<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
Mat<T> norm_forward(const Mat<T>& x, const NormWeights<T>& w, NormCache<T>& c) {
    const auto n = x.rows();
    const auto d = x.cols();
    c.xhat.resize(n, d);
    c.inv_std.resize(static_cast<std::size_t>(n));
    Mat<T> y(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        T mean = x.row(i).mean();
        T var = (x.row(i).array() - mean).square().mean();
        T is = T(1) / std::sqrt(var + T(kNormEps));
        c.inv_std[static_cast<std::size_t>(i)] = is;
        c.xhat.row(i) = (x.row(i).array() - mean) * is;
        y.row(i) = c.xhat.row(i).cwiseProduct(w.gain) + w.bias;
    }
    return y;
}

template <typename T>
Mat<T> norm_backward(const Mat<T>& dy, const NormWeights<T>& w, const NormCache<T>& c, NormWeights<T>& g) {
    g.gain += dy.cwiseProduct(c.xhat).colwise().sum();
    g.bias += dy.colwise().sum();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        auto dxhat = dy.row(i).cwiseProduct(w.gain).eval();
        T m1 = dxhat.mean();
        T m2 = dxhat.cwiseProduct(c.xhat.row(i)).mean();
        dx.row(i) = (dxhat.array() - m1 - c.xhat.row(i).array() * m2) * c.inv_std[static_cast<std::size_t>(i)];
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Feed-forward (tanh GELU)

template <typename T>
struct FfnCache {
    Mat<T> x, pre, act;
};

template <typename T>
T gelu(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    T t = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

template <typename T>
Mat<T> ffn_forward(const Mat<T>& x, const FeedForwardWeights<T>& w, FfnCache<T>& c) {
    c.x = x;
    c.pre = x * w.w1;
    c.pre.rowwise() += w.b1.row(0);
    c.act = c.pre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> y = c.act * w.w2;
    y.rowwise() += w.b2.row(0);
    return y;
}

template <typename T>
Mat<T> ffn_backward(const Mat<T>& dy, const FeedForwardWeights<T>& w, const FfnCache<T>& c, FeedForwardWeights<T>& g) {
    g.w2.noalias() += c.act.transpose() * dy;
    g.b2 += dy.colwise().sum();
    Mat<T> dpre = (dy * w.w2.transpose()).cwiseProduct(c.pre.unaryExpr([](T v) { return gelu_grad(v); }));
    g.w1.noalias() += c.x.transpose() * dpre;
    g.b1 += dpre.colwise().sum();
    return dpre * w.w1.transpose();
}

// ---------------------------------------------------------------------------
// Multi-head attention over disjoint query blocks

struct AttnBlock {
    Eigen::Index q0, nq, k0, nk;
};

enum class BiasKind { none, causal, symmetric };

struct AttnLayout {
    std::vector<AttnBlock> blocks;
    bool causal = false;
    BiasKind bias = BiasKind::none;
    std::size_t radius = 0;
    /// Indexed by absolute key row; nullptr admits every key.
    const std::vector<std::uint8_t>* key_valid = nullptr;

    Eigen::Index bucket(Eigen::Index i, Eigen::Index j) const {
        auto r = static_cast<Eigen::Index>(radius);
        if (bias == BiasKind::causal) return std::min(i - j, r - 1);
        return std::clamp(i - j, -(r - 1), r - 1) + (r - 1);
    }
    bool allowed(const AttnBlock& b, Eigen::Index i, Eigen::Index j) const {
        if (causal && j > i) return false;
        return key_valid == nullptr || (*key_valid)[static_cast<std::size_t>(b.k0 + j)] != 0;
    }
};

template <typename T>
struct AttnCache {
    Mat<T> xq, xkv, q, k, v, o;
    std::vector<Mat<T>> probs;  // block-major, then head
};

template <typename T>
Mat<T> attention_forward(const Mat<T>& xq, const Mat<T>& xkv, const AttentionWeights<T>& w, const Mat<T>* rel_bias,
                         const AttnLayout& layout, std::size_t heads, AttnCache<T>& c) {
    const auto d = w.wq.cols();
    const auto dh = d / static_cast<Eigen::Index>(heads);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    c.xq = xq;
    c.xkv = xkv;
    c.q.noalias() = xq * w.wq;
    c.k.noalias() = xkv * w.wk;
    c.v.noalias() = xkv * w.wv;
    c.o = Mat<T>::Zero(xq.rows(), d);
    c.probs.assign(layout.blocks.size() * heads, Mat<T>());
    for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
        const auto& blk = layout.blocks[b];
        for (std::size_t h = 0; h < heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h) * dh;
            Mat<T> s = (c.q.block(blk.q0, col, blk.nq, dh) * c.k.block(blk.k0, col, blk.nk, dh).transpose()) * scale;
            for (Eigen::Index i = 0; i < blk.nq; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (Eigen::Index j = 0; j < blk.nk; ++j) {
                    if (!layout.allowed(blk, i, j)) {
                        s(i, j) = -std::numeric_limits<T>::infinity();
                        continue;
                    }
                    if (layout.bias != BiasKind::none) s(i, j) += (*rel_bias)(static_cast<Eigen::Index>(h), layout.bucket(i, j));
                    mx = std::max(mx, s(i, j));
                }
                if (mx == -std::numeric_limits<T>::infinity()) {
                    s.row(i).setZero();  // nothing to attend to
                    continue;
                }
                T sum = 0;
                for (Eigen::Index j = 0; j < blk.nk; ++j) {
                    T e = s(i, j) == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(s(i, j) - mx);
                    s(i, j) = e;
                    sum += e;
                }
                s.row(i) /= sum;
            }
            c.o.block(blk.q0, col, blk.nq, dh).noalias() = s * c.v.block(blk.k0, col, blk.nk, dh);
            c.probs[b * heads + h] = std::move(s);
        }
    }
    return c.o * w.wo;
}

template <typename T>
void attention_backward(const Mat<T>& dy, const AttentionWeights<T>& w, const AttnLayout& layout, std::size_t heads,
                        const AttnCache<T>& c, AttentionWeights<T>& g, Mat<T>* g_rel_bias, Mat<T>& dxq, Mat<T>& dxkv) {
    const auto d = w.wq.cols();
    const auto dh = d / static_cast<Eigen::Index>(heads);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    g.wo.noalias() += c.o.transpose() * dy;
    Mat<T> dout = dy * w.wo.transpose();
    Mat<T> dq = Mat<T>::Zero(c.q.rows(), d);
    Mat<T> dk = Mat<T>::Zero(c.k.rows(), d);
    Mat<T> dv = Mat<T>::Zero(c.v.rows(), d);
    for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
        const auto& blk = layout.blocks[b];
        for (std::size_t h = 0; h < heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h) * dh;
            const Mat<T>& p = c.probs[b * heads + h];
            auto d_o = dout.block(blk.q0, col, blk.nq, dh);
            Mat<T> dp = d_o * c.v.block(blk.k0, col, blk.nk, dh).transpose();
            dv.block(blk.k0, col, blk.nk, dh).noalias() += p.transpose() * d_o;
            Mat<T> ds(blk.nq, blk.nk);
            for (Eigen::Index i = 0; i < blk.nq; ++i) {
                T dot = p.row(i).dot(dp.row(i));
                ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
            }
            if (layout.bias != BiasKind::none && g_rel_bias) {
                for (Eigen::Index i = 0; i < blk.nq; ++i) {
                    for (Eigen::Index j = 0; j < blk.nk; ++j) {
                        if (layout.allowed(blk, i, j)) (*g_rel_bias)(static_cast<Eigen::Index>(h), layout.bucket(i, j)) += ds(i, j);
                    }
                }
            }
            dq.block(blk.q0, col, blk.nq, dh).noalias() += (ds * c.k.block(blk.k0, col, blk.nk, dh)) * scale;
            dk.block(blk.k0, col, blk.nk, dh).noalias() += (ds.transpose() * c.q.block(blk.q0, col, blk.nq, dh)) * scale;
        }
    }
    g.wq.noalias() += c.xq.transpose() * dq;
    g.wk.noalias() += c.xkv.transpose() * dk;
    g.wv.noalias() += c.xkv.transpose() * dv;
    dxq = dq * w.wq.transpose();
    dxkv = dk * w.wk.transpose();
    dxkv.noalias() += dv * w.wv.transpose();
}

// ---------------------------------------------------------------------------
// Whole-model tape

template <typename T>
struct EncoderLayerTape {
    NormCache<T> ln_attn;
    AttnCache<T> attn;
    NormCache<T> ln_ffn;
    FfnCache<T> ffn;
};

template <typename T>
struct DecoderLayerTape {
    NormCache<T> ln_attn;
    AttnCache<T> attn;
    bool cca_active = false;
    NormCache<T> ln_cca;
    AttnCache<T> cca;
    NormCache<T> ln_ffn;
    FfnCache<T> ffn;
};

template <typename T>
struct Tape {
    std::vector<TokenId> tokens;
    // Neighbor encoder over all pairs of all chunks, pairs laid out by chunk.
    std::vector<TokenId> enc_tokens;
    std::vector<std::uint8_t> enc_valid;
    AttnLayout enc_layout;
    std::vector<EncoderLayerTape<T>> enc_layers;
    NormCache<T> enc_final;
    Mat<T> encoded;
    AttnLayout cca_layout;
    AttnLayout self_layout;
    std::vector<DecoderLayerTape<T>> dec_layers;
    NormCache<T> dec_final;
    Mat<T> final_hidden;
    Mat<T> probs;
};

template <typename T>
Mat<T> gather_rows(const Mat<T>& table, std::span<const TokenId> ids) {
    Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
    return out;
}

template <typename T>
Mat<T> run_encoder(const ModelConfig& cfg, const Params<T>& p, Tape<T>& tape) {
    Mat<T> h = gather_rows(p.embedding, tape.enc_tokens);
    tape.enc_layers.resize(p.encoder.size());
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        const auto& w = p.encoder[l];
        auto& t = tape.enc_layers[l];
        Mat<T> a = norm_forward(h, w.ln_attn, t.ln_attn);
        h += attention_forward(a, a, w.attn, &w.rel_bias, tape.enc_layout, cfg.n_heads, t.attn);
        Mat<T> f = norm_forward(h, w.ln_ffn, t.ln_ffn);
        h += ffn_forward(f, w.ffn, t.ffn);
    }
    return norm_forward(h, p.enc_final, tape.enc_final);
}

void check_vocab(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    for (auto t : tokens) {
        if (t >= cfg.vocab_size) {
            throw Error(ErrorCode::invalid_argument, fmt::format("token id {} >= vocab size {}", t, cfg.vocab_size));
        }
    }
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    if (tokens.size() > cfg.max_seq_len) {
        throw Error(ErrorCode::invalid_argument,
                    fmt::format("sequence length {} exceeds max_seq_len {}", tokens.size(), cfg.max_seq_len));
    }
    check_vocab(cfg, tokens);
}

template <typename T>
void run_forward(const ModelConfig& cfg, const Params<T>& p, std::span<const TokenId> tokens, const NeighborTokens& rets,
                 RetrievalSwitch mode, Tape<T>& tape) {
    check_tokens(cfg, tokens);
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const auto m = static_cast<Eigen::Index>(cfg.chunk_size);
    tape.tokens.assign(tokens.begin(), tokens.end());

    bool use_cca = mode == RetrievalSwitch::on && !cfg.cca_layers.empty() && n > 0;
    if (use_cca) {
        const std::size_t chunks = (tokens.size() + cfg.chunk_size - 1) / cfg.chunk_size;
        if (rets.size() + 1 < chunks) {
            throw Error(ErrorCode::invalid_argument,
                        fmt::format("retrieval on needs RET for chunks 1..{}, got {}", chunks - 1, rets.size()));
        }
        const std::size_t pair_len = 2 * cfg.chunk_size;
        tape.enc_tokens.clear();
        tape.enc_layout = AttnLayout{};
        tape.enc_layout.bias = BiasKind::symmetric;
        tape.enc_layout.radius = cfg.encoder_bias_radius();
        tape.cca_layout = AttnLayout{};
        for (std::size_t u = 1; u < chunks; ++u) {
            auto k0 = static_cast<Eigen::Index>(tape.enc_tokens.size());
            for (const auto& pair : rets[u - 1]) {
                if (pair.size() != pair_len) {
                    throw Error(ErrorCode::invalid_argument,
                                fmt::format("neighbor pair has {} tokens, expected {}", pair.size(), pair_len));
                }
                check_vocab(cfg, pair);
                auto start = static_cast<Eigen::Index>(tape.enc_tokens.size());
                tape.enc_tokens.insert(tape.enc_tokens.end(), pair.begin(), pair.end());
                tape.enc_layout.blocks.push_back({start, static_cast<Eigen::Index>(pair_len), start,
                                                  static_cast<Eigen::Index>(pair_len)});
            }
            auto nk = static_cast<Eigen::Index>(tape.enc_tokens.size()) - k0;
            auto q0 = static_cast<Eigen::Index>(u) * m - 1;
            if (nk > 0 && q0 < n) tape.cca_layout.blocks.push_back({q0, std::min(m, n - q0), k0, nk});
        }
        tape.enc_valid.resize(tape.enc_tokens.size());
        for (std::size_t i = 0; i < tape.enc_tokens.size(); ++i) tape.enc_valid[i] = tape.enc_tokens[i] != kPad;
        tape.enc_layout.key_valid = &tape.enc_valid;
        tape.cca_layout.key_valid = &tape.enc_valid;
        if (!tape.enc_tokens.empty()) tape.encoded = run_encoder(cfg, p, tape);
        use_cca = !tape.cca_layout.blocks.empty();
    }

    tape.self_layout = AttnLayout{};
    tape.self_layout.causal = true;
    tape.self_layout.bias = BiasKind::causal;
    tape.self_layout.radius = cfg.decoder_bias_radius();
    tape.self_layout.blocks.push_back({0, n, 0, n});

    Mat<T> h = gather_rows(p.embedding, tokens);
    tape.dec_layers.resize(p.decoder.size());
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        const auto& w = p.decoder[l];
        auto& t = tape.dec_layers[l];
        Mat<T> a = norm_forward(h, w.ln_attn, t.ln_attn);
        h += attention_forward(a, a, w.attn, &w.rel_bias, tape.self_layout, cfg.n_heads, t.attn);
        t.cca_active = use_cca && w.has_cca;
        if (t.cca_active) {
            Mat<T> c = norm_forward(h, w.ln_cca, t.ln_cca);
            h += attention_forward(c, tape.encoded, w.cca, static_cast<const Mat<T>*>(nullptr), tape.cca_layout,
                                   cfg.n_heads, t.cca);
        }
        Mat<T> f = norm_forward(h, w.ln_ffn, t.ln_ffn);
        h += ffn_forward(f, w.ffn, t.ffn);
    }
    tape.final_hidden = norm_forward(h, p.dec_final, tape.dec_final);
    Mat<T> logits = tape.final_hidden * p.out_w;
    logits.rowwise() += p.out_b.row(0);
    tape.probs.resize(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        T mx = logits.row(i).maxCoeff();
        auto e = (logits.row(i).array() - mx).exp();
        tape.probs.row(i) = e / e.sum();
    }
}

template <typename T>
void scatter_rows(Mat<T>& table, std::span<const TokenId> ids, const Mat<T>& rows) {
    for (std::size_t i = 0; i < ids.size(); ++i) table.row(ids[i]) += rows.row(static_cast<Eigen::Index>(i));
}

template <typename T>
void run_backward(const ModelConfig& cfg, const Params<T>& p, const Tape<T>& tape, const Mat<T>& dlogits, Params<T>& g) {
    g.out_w.noalias() += tape.final_hidden.transpose() * dlogits;
    g.out_b += dlogits.colwise().sum();
    Mat<T> dh = norm_backward(Mat<T>(dlogits * p.out_w.transpose()), p.dec_final, tape.dec_final, g.dec_final);

    Mat<T> dencoded;
    if (tape.encoded.size() > 0) dencoded = Mat<T>::Zero(tape.encoded.rows(), tape.encoded.cols());
    Mat<T> dxq, dxkv;
    for (std::size_t l = p.decoder.size(); l-- > 0;) {
        const auto& w = p.decoder[l];
        auto& gw = g.decoder[l];
        const auto& t = tape.dec_layers[l];
        dh += norm_backward(ffn_backward(dh, w.ffn, t.ffn, gw.ffn), w.ln_ffn, t.ln_ffn, gw.ln_ffn);
        if (t.cca_active) {
            attention_backward(dh, w.cca, tape.cca_layout, cfg.n_heads, t.cca, gw.cca, static_cast<Mat<T>*>(nullptr),
                               dxq, dxkv);
            dh += norm_backward(dxq, w.ln_cca, t.ln_cca, gw.ln_cca);
            dencoded += dxkv;
        }
        attention_backward(dh, w.attn, tape.self_layout, cfg.n_heads, t.attn, gw.attn, &gw.rel_bias, dxq, dxkv);
        dxq += dxkv;
        dh += norm_backward(dxq, w.ln_attn, t.ln_attn, gw.ln_attn);
    }
    scatter_rows(g.embedding, tape.tokens, dh);

    if (dencoded.size() == 0) return;
    Mat<T> de = norm_backward(dencoded, p.enc_final, tape.enc_final, g.enc_final);
    for (std::size_t l = p.encoder.size(); l-- > 0;) {
        const auto& w = p.encoder[l];
        auto& gw = g.encoder[l];
        const auto& t = tape.enc_layers[l];
        de += norm_backward(ffn_backward(de, w.ffn, t.ffn, gw.ffn), w.ln_ffn, t.ln_ffn, gw.ln_ffn);
        attention_backward(de, w.attn, tape.enc_layout, cfg.n_heads, t.attn, gw.attn, &gw.rel_bias, dxq, dxkv);
        dxq += dxkv;
        de += norm_backward(dxq, w.ln_attn, t.ln_attn, gw.ln_attn);
    }
    scatter_rows(g.embedding, tape.enc_tokens, de);
}

}  // namespace

template <typename T>
Mat<T> forward(const ModelConfig& cfg, const Params<T>& params, std::span<const TokenId> tokens,
               const NeighborTokens& rets, RetrievalSwitch mode) {
    Tape<T> tape;
    run_forward(cfg, params, tokens, rets, mode, tape);
    return std::move(tape.probs);
}

template <typename T>
Mat<T> encode_neighbors(const ModelConfig& cfg, const Params<T>& params, std::span<const std::vector<TokenId>> pairs) {
    const std::size_t pair_len = 2 * cfg.chunk_size;
    Tape<T> tape;
    tape.enc_layout.bias = BiasKind::symmetric;
    tape.enc_layout.radius = cfg.encoder_bias_radius();
    for (const auto& pair : pairs) {
        if (pair.size() != pair_len) {
            throw Error(ErrorCode::invalid_argument,
                        fmt::format("neighbor pair has {} tokens, expected {}", pair.size(), pair_len));
        }
        check_vocab(cfg, pair);
        auto start = static_cast<Eigen::Index>(tape.enc_tokens.size());
        tape.enc_tokens.insert(tape.enc_tokens.end(), pair.begin(), pair.end());
        tape.enc_layout.blocks.push_back({start, static_cast<Eigen::Index>(pair_len), start, static_cast<Eigen::Index>(pair_len)});
    }
    tape.enc_valid.resize(tape.enc_tokens.size());
    for (std::size_t i = 0; i < tape.enc_tokens.size(); ++i) tape.enc_valid[i] = tape.enc_tokens[i] != kPad;
    tape.enc_layout.key_valid = &tape.enc_valid;
    if (tape.enc_tokens.empty()) return Mat<T>(0, static_cast<Eigen::Index>(cfg.d_model));
    return run_encoder(cfg, params, tape);
}

template <typename T>
Mat<T> cross_entropy_logit_gradient(const Mat<T>& probs, std::span<const TokenId> tokens) {
    Mat<T> d = Mat<T>::Zero(probs.rows(), probs.cols());
    std::size_t count = 0;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) count += tokens[t + 1] != kPad;
    if (count == 0) return d;
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        if (tokens[t + 1] == kPad) continue;
        auto r = static_cast<Eigen::Index>(t);
        d.row(r) = probs.row(r) * inv;
        d(r, tokens[t + 1]) -= inv;
    }
    return d;
}

template <typename T>
double loss_and_gradient(const ModelConfig& cfg, const Params<T>& params, std::span<const TokenId> tokens,
                         const NeighborTokens& rets, RetrievalSwitch mode, Params<T>* grads) {
    Tape<T> tape;
    run_forward(cfg, params, tokens, rets, mode, tape);
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        if (tokens[t + 1] == kPad) continue;
        nll -= std::log(static_cast<double>(tape.probs(static_cast<Eigen::Index>(t), tokens[t + 1])));
        ++count;
    }
    if (count == 0) return 0.0;
    if (grads) run_backward(cfg, params, tape, cross_entropy_logit_gradient(tape.probs, tokens), *grads);
    return nll / static_cast<double>(count);
}

template <typename T>
std::pair<double, std::size_t> chunk_nll(const Mat<T>& probs, std::span<const TokenId> tokens, std::size_t chunk_size,
                                         std::size_t u) {
    if (u == 0) throw Error(ErrorCode::invalid_argument, "chunk index u is 1-based");
    const std::size_t begin = (u - 1) * chunk_size;
    const std::size_t end = u * chunk_size;
    if (end > tokens.size() || static_cast<std::size_t>(probs.rows()) < tokens.size()) {
        throw Error(ErrorCode::invalid_argument, fmt::format("chunk {} is not fully inside the sequence", u));
    }
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t pos = std::max<std::size_t>(begin, 1); pos < end; ++pos) {
        if (tokens[pos] == kPad) continue;
        nll -= std::log(static_cast<double>(probs(static_cast<Eigen::Index>(pos - 1), tokens[pos])));
        ++count;
    }
    return {nll, count};
}

template <typename T>
std::optional<double> chunk_perplexity(const Mat<T>& probs, std::span<const TokenId> tokens, std::size_t chunk_size,
                                       std::size_t u) {
    auto [nll, count] = chunk_nll(probs, tokens, chunk_size, u);
    if (count == 0) return std::nullopt;
    return std::exp(nll / static_cast<double>(count));
}

#define RETROBM25_INSTANTIATE(T)                                                                                     \
    template struct Params<T>;                                                                                       \
    template Mat<T> forward<T>(const ModelConfig&, const Params<T>&, std::span<const TokenId>, const NeighborTokens&, \
                               RetrievalSwitch);                                                                     \
    template Mat<T> encode_neighbors<T>(const ModelConfig&, const Params<T>&, std::span<const std::vector<TokenId>>); \
    template double loss_and_gradient<T>(const ModelConfig&, const Params<T>&, std::span<const TokenId>,            \
                                         const NeighborTokens&, RetrievalSwitch, Params<T>*);                       \
    template Mat<T> cross_entropy_logit_gradient<T>(const Mat<T>&, std::span<const TokenId>);                        \
    template std::pair<double, std::size_t> chunk_nll<T>(const Mat<T>&, std::span<const TokenId>, std::size_t,       \
                                                         std::size_t);                                               \
    template std::optional<double> chunk_perplexity<T>(const Mat<T>&, std::span<const TokenId>, std::size_t,         \
                                                       std::size_t);

RETROBM25_INSTANTIATE(float)
RETROBM25_INSTANTIATE(double)

#undef RETROBM25_INSTANTIATE

}  // namespace retrobm25::lm
