#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "retrobm25/common.hpp"
#include "retrobm25/retrieval.hpp"

namespace retrobm25::lm {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    std::size_t vocab_size = 2000;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t n_decoder_layers = 4;
    std::size_t n_encoder_layers = 1;
    /// Decoder layers (0-based) that carry chunked cross-attention.
    std::vector<std::size_t> cca_layers{2, 3};
    std::size_t chunk_size = 64;
    std::size_t neighbors = 2;
    std::size_t max_seq_len = 512;
    /// Relative offsets beyond this share the last bucket.
    std::size_t rel_buckets = 512;
    std::size_t d_ff = 512;
    std::uint64_t seed = 0;

    void validate() const;
    bool has_cca(std::size_t layer) const;
    std::size_t encoder_bias_radius() const;
    std::size_t decoder_bias_radius() const;

    /// Flat "key = value" lines; the checkpoint's config echo.
    std::string to_text() const;
    static ModelConfig from_text(std::string_view text);
};

template <typename T>
struct NormWeights {
    Mat<T> gain;  // 1 x d
    Mat<T> bias;  // 1 x d
};

template <typename T>
struct AttentionWeights {
    Mat<T> wq, wk, wv, wo;  // d x d
};

template <typename T>
struct FeedForwardWeights {
    Mat<T> w1;  // d x ff
    Mat<T> b1;  // 1 x ff
    Mat<T> w2;  // ff x d
    Mat<T> b2;  // 1 x d
};

template <typename T>
struct EncoderLayerWeights {
    NormWeights<T> ln_attn;
    AttentionWeights<T> attn;
    Mat<T> rel_bias;  // heads x (2R-1), symmetric offsets
    NormWeights<T> ln_ffn;
    FeedForwardWeights<T> ffn;
};

template <typename T>
struct DecoderLayerWeights {
    NormWeights<T> ln_attn;
    AttentionWeights<T> attn;
    Mat<T> rel_bias;  // heads x R, causal offsets
    bool has_cca = false;
    NormWeights<T> ln_cca;
    AttentionWeights<T> cca;
    NormWeights<T> ln_ffn;
    FeedForwardWeights<T> ffn;
};

/// Every learnable tensor of the model. visit() enumerates them with stable
/// names; checkpoints, the optimizer and gradient checks all go through it.
template <typename T>
struct Params {
    Mat<T> embedding;  // V x d, shared by decoder and neighbor encoder
    std::vector<EncoderLayerWeights<T>> encoder;
    NormWeights<T> enc_final;
    std::vector<DecoderLayerWeights<T>> decoder;
    NormWeights<T> dec_final;
    Mat<T> out_w;  // d x V
    Mat<T> out_b;  // 1 x V

    static Params zeros(const ModelConfig& cfg);
    static Params initialize(const ModelConfig& cfg, std::uint64_t seed);

    template <typename Fn>
    void visit(Fn&& fn);
    template <typename Fn>
    void visit(Fn&& fn) const;

    template <typename U>
    Params<U> cast() const;

    std::size_t count() const;
    void set_zero();
};

/// Token ids of the [N; F] pairs conditioning each chunk: rets[u-1][i] holds the
/// 2m tokens of the i-th pair in RET(C_u).
using NeighborTokens = std::vector<std::vector<std::vector<TokenId>>>;

NeighborTokens neighbor_tokens(std::span<const RetrievalResult> rets);

enum class RetrievalSwitch { on, off };

/// Next-token distributions, one row per position (L x V).
template <typename T>
Mat<T> forward(const ModelConfig& cfg, const Params<T>& params, std::span<const TokenId> tokens,
               const NeighborTokens& rets, RetrievalSwitch mode);

/// Encoder output for the neighbor pairs of one chunk: (pairs * 2m) x d rows.
template <typename T>
Mat<T> encode_neighbors(const ModelConfig& cfg, const Params<T>& params,
                        std::span<const std::vector<TokenId>> pairs);

/// Mean next-token cross-entropy over positions whose target is not PAD, with
/// gradients accumulated into `grads`. Returns NaN-free loss or throws.
template <typename T>
double loss_and_gradient(const ModelConfig& cfg, const Params<T>& params, std::span<const TokenId> tokens,
                         const NeighborTokens& rets, RetrievalSwitch mode, Params<T>* grads);

/// dLoss/dlogits for the mean cross-entropy: (p - onehot(target)) / count on
/// rows with a non-PAD target, zero elsewhere.
template <typename T>
Mat<T> cross_entropy_logit_gradient(const Mat<T>& probs, std::span<const TokenId> tokens);

/// Teacher-forced perplexity of chunk u (1-based) under `probs` (L x V):
/// exp of the mean -log p over the chunk's non-PAD target positions. The first
/// token of the sequence has no prediction. nullopt when no target remains.
template <typename T>
std::optional<double> chunk_perplexity(const Mat<T>& probs, std::span<const TokenId> tokens, std::size_t chunk_size,
                                       std::size_t u);

/// Summed negative log-likelihood and target count over a position range.
template <typename T>
std::pair<double, std::size_t> chunk_nll(const Mat<T>& probs, std::span<const TokenId> tokens, std::size_t chunk_size,
                                         std::size_t u);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t steps = 200;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 0.0;
    /// Linear learning-rate ramp over the first steps; 0 disables.
    std::size_t warmup_steps = 0;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    RetrievalSwitch retrieval = RetrievalSwitch::on;
};

struct TrainingSequence {
    std::string id;
    std::vector<TokenId> tokens;
    NeighborTokens rets;
};

struct TrainResult {
    std::vector<double> losses;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Adam on the teacher-forced loss. Sequences are visited in seeded shuffled
/// epochs. Throws Error(diverged) naming the step if a loss is non-finite.
TrainResult train(const ModelConfig& cfg, Params<float>& params, std::span<const TrainingSequence> data,
                  const TrainConfig& tc, const ProgressFn& progress = {});

struct GradientCheckReport {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t checked = 0;
    /// Largest |analytic| over all CCA tensors; exactly 0 when retrieval is off.
    double max_cca_grad = 0.0;
};

/// Compares analytic gradients against central differences (step 1e-4) in
/// double precision on a random sequence of 2m+2 tokens with random neighbors.
/// Relative error is |a - n| / max(|a|, |n|, 1e-2). `max_per_tensor` = 0 checks
/// every element.
GradientCheckReport gradient_check(const ModelConfig& cfg, std::uint64_t seed, RetrievalSwitch mode,
                                   std::size_t max_per_tensor = 0);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Params<float>& params);
std::pair<ModelConfig, Params<float>> load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& cfg, const Params<float>& params);
std::pair<ModelConfig, Params<float>> deserialize_checkpoint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------

template <typename T>
template <typename Fn>
void Params<T>::visit(Fn&& fn) {
    auto norm = [&](const std::string& p, NormWeights<T>& n) {
        fn(p + ".gain", n.gain);
        fn(p + ".bias", n.bias);
    };
    auto attn = [&](const std::string& p, AttentionWeights<T>& a) {
        fn(p + ".wq", a.wq);
        fn(p + ".wk", a.wk);
        fn(p + ".wv", a.wv);
        fn(p + ".wo", a.wo);
    };
    auto ffn = [&](const std::string& p, FeedForwardWeights<T>& f) {
        fn(p + ".w1", f.w1);
        fn(p + ".b1", f.b1);
        fn(p + ".w2", f.w2);
        fn(p + ".b2", f.b2);
    };
    fn(std::string("embedding"), embedding);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
        auto p = "encoder." + std::to_string(i);
        norm(p + ".ln_attn", encoder[i].ln_attn);
        attn(p + ".attn", encoder[i].attn);
        fn(p + ".rel_bias", encoder[i].rel_bias);
        norm(p + ".ln_ffn", encoder[i].ln_ffn);
        ffn(p + ".ffn", encoder[i].ffn);
    }
    norm("encoder.final", enc_final);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
        auto p = "decoder." + std::to_string(i);
        norm(p + ".ln_attn", decoder[i].ln_attn);
        attn(p + ".attn", decoder[i].attn);
        fn(p + ".rel_bias", decoder[i].rel_bias);
        if (decoder[i].has_cca) {
            norm(p + ".ln_cca", decoder[i].ln_cca);
            attn(p + ".cca", decoder[i].cca);
        }
        norm(p + ".ln_ffn", decoder[i].ln_ffn);
        ffn(p + ".ffn", decoder[i].ffn);
    }
    norm("decoder.final", dec_final);
    fn(std::string("out.w"), out_w);
    fn(std::string("out.b"), out_b);
}

template <typename T>
template <typename Fn>
void Params<T>::visit(Fn&& fn) const {
    const_cast<Params<T>*>(this)->visit([&](const std::string& name, Mat<T>& m) { fn(name, static_cast<const Mat<T>&>(m)); });
}

template <typename T>
template <typename U>
Params<U> Params<T>::cast() const {
    Params<U> out;
    out.embedding = embedding.template cast<U>();
    auto norm = [](const NormWeights<T>& n) { return NormWeights<U>{n.gain.template cast<U>(), n.bias.template cast<U>()}; };
    auto attn = [](const AttentionWeights<T>& a) {
        return AttentionWeights<U>{a.wq.template cast<U>(), a.wk.template cast<U>(), a.wv.template cast<U>(),
                                   a.wo.template cast<U>()};
    };
    auto ffn = [](const FeedForwardWeights<T>& f) {
        return FeedForwardWeights<U>{f.w1.template cast<U>(), f.b1.template cast<U>(), f.w2.template cast<U>(),
                                     f.b2.template cast<U>()};
    };
    for (const auto& e : encoder) {
        out.encoder.push_back({norm(e.ln_attn), attn(e.attn), e.rel_bias.template cast<U>(), norm(e.ln_ffn), ffn(e.ffn)});
    }
    out.enc_final = norm(enc_final);
    for (const auto& d : decoder) {
        DecoderLayerWeights<U> l;
        l.ln_attn = norm(d.ln_attn);
        l.attn = attn(d.attn);
        l.rel_bias = d.rel_bias.template cast<U>();
        l.has_cca = d.has_cca;
        if (d.has_cca) {
            l.ln_cca = norm(d.ln_cca);
            l.cca = attn(d.cca);
        }
        l.ln_ffn = norm(d.ln_ffn);
        l.ffn = ffn(d.ffn);
        out.decoder.push_back(std::move(l));
    }
    out.dec_final = norm(dec_final);
    out.out_w = out_w.template cast<U>();
    out.out_b = out_b.template cast<U>();
    return out;
}

}  // namespace retrobm25::lm
