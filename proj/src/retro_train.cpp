#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

#include "retrobm25/binary_io.hpp"
#include "retrobm25/random.hpp"
#include "retrobm25/retro_lm.hpp"

namespace retrobm25::lm {

namespace {

std::vector<Mat<float>*> tensors_of(Params<float>& p) {
    std::vector<Mat<float>*> out;
    p.visit([&](const std::string&, Mat<float>& m) { out.push_back(&m); });
    return out;
}

}  // namespace

TrainResult train(const ModelConfig& cfg, Params<float>& params, std::span<const TrainingSequence> data,
                  const TrainConfig& tc, const ProgressFn& progress) {
    cfg.validate();
    if (data.empty()) throw Error(ErrorCode::empty_corpus, "train: no training sequences");
    if (tc.batch_size == 0) throw Error(ErrorCode::invalid_argument, "train: batch_size must be >= 1");
    if (tc.lr < 0.0) throw Error(ErrorCode::invalid_argument, "train: lr must be >= 0");

    auto weights = tensors_of(params);
    Params<float> grads = Params<float>::zeros(cfg);
    Params<float> m1 = Params<float>::zeros(cfg);
    Params<float> m2 = Params<float>::zeros(cfg);
    auto g = tensors_of(grads);
    auto mo = tensors_of(m1);
    auto vo = tensors_of(m2);
    if (g.size() != weights.size()) throw Error(ErrorCode::size_mismatch, "train: params do not match the config");

    Rng rng(tc.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    auto next_index = [&] {
        if (cursor == order.size()) {
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
            cursor = 0;
        }
        return order[cursor++];
    };

    TrainResult result;
    result.losses.reserve(tc.steps);
    double b1t = 1.0;
    double b2t = 1.0;
    for (std::size_t step = 1; step <= tc.steps; ++step) {
        grads.set_zero();
        double loss = 0.0;
        for (std::size_t b = 0; b < tc.batch_size; ++b) {
            const auto& seq = data[next_index()];
            loss += loss_and_gradient<float>(cfg, params, seq.tokens, seq.rets, tc.retrieval, &grads);
        }
        loss /= static_cast<double>(tc.batch_size);
        if (!std::isfinite(loss)) {
            throw Error(ErrorCode::diverged, fmt::format("training diverged: non-finite loss at step {}", step));
        }
        result.losses.push_back(loss);

        double scale = 1.0 / static_cast<double>(tc.batch_size);
        if (tc.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto* t : g) sq += t->template cast<double>().squaredNorm();
            double norm = std::sqrt(sq) * scale;
            if (norm > tc.grad_clip) scale *= tc.grad_clip / norm;
        }
        b1t *= tc.beta1;
        b2t *= tc.beta2;
        double lr = tc.lr;
        if (step <= tc.warmup_steps) lr *= static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
        const auto step_size = static_cast<float>(lr / (1.0 - b1t));
        const auto bias2 = static_cast<float>(1.0 / (1.0 - b2t));
        const auto b1 = static_cast<float>(tc.beta1);
        const auto b2 = static_cast<float>(tc.beta2);
        const auto eps = static_cast<float>(tc.eps);
        const auto s = static_cast<float>(scale);
        for (std::size_t i = 0; i < weights.size(); ++i) {
            auto gi = (g[i]->array() * s).eval();
            mo[i]->array() = b1 * mo[i]->array() + (1.0f - b1) * gi;
            vo[i]->array() = b2 * vo[i]->array() + (1.0f - b2) * gi.square();
            weights[i]->array() -= step_size * mo[i]->array() / ((vo[i]->array() * bias2).sqrt() + eps);
        }
        if (progress) progress(step, loss);
    }
    return result;
}

GradientCheckReport gradient_check(const ModelConfig& cfg, std::uint64_t seed, RetrievalSwitch mode,
                                   std::size_t max_per_tensor) {
    cfg.validate();
    Rng rng(seed);
    // Unit-scale embeddings keep layer-norm inputs out of the high-curvature regime.
    auto params = Params<double>::zeros(cfg);
    params.visit([&](const std::string& name, Mat<double>& m) {
        const double center = name.ends_with(".gain") ? 1.0 : 0.0;
        const double scale = name == "embedding" ? 1.0 : 0.3;
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = center + scale * rng.normal();
    });

    const std::size_t len = 2 * cfg.chunk_size + 2;
    if (len > cfg.max_seq_len) throw Error(ErrorCode::invalid_argument, "gradient_check: max_seq_len below 2m+2");
    auto draw = [&] { return static_cast<TokenId>(2 + rng.below(cfg.vocab_size - 2)); };
    std::vector<TokenId> tokens(len);
    for (auto& t : tokens) t = draw();
    tokens[len - 1] = kPad;  // one masked target

    const std::size_t chunks = (len + cfg.chunk_size - 1) / cfg.chunk_size;
    NeighborTokens rets(chunks - 1);
    for (std::size_t u = 0; u + 1 < chunks; ++u) {
        for (std::size_t k = 0; k < std::max<std::size_t>(cfg.neighbors, 1); ++k) {
            std::vector<TokenId> pair(2 * cfg.chunk_size);
            for (auto& t : pair) t = draw();
            // Second neighbor ends its document: all-PAD continuation.
            if (k == 1) std::fill(pair.begin() + static_cast<std::ptrdiff_t>(cfg.chunk_size), pair.end(), kPad);
            rets[u].push_back(std::move(pair));
        }
    }

    auto grads = Params<double>::zeros(cfg);
    loss_and_gradient<double>(cfg, params, tokens, rets, mode, &grads);

    std::vector<std::pair<std::string, Mat<double>*>> analytic;
    grads.visit([&](const std::string& name, Mat<double>& m) { analytic.emplace_back(name, &m); });

    GradientCheckReport report;
    const double h = 1e-4;
    std::size_t ti = 0;
    params.visit([&](const std::string& name, Mat<double>& w) {
        const Mat<double>& a = *analytic[ti++].second;
        const bool is_cca = name.find(".cca.") != std::string::npos || name.find(".ln_cca.") != std::string::npos;
        if (is_cca) report.max_cca_grad = std::max(report.max_cca_grad, a.cwiseAbs().maxCoeff());
        const auto n = static_cast<std::size_t>(w.size());
        const std::size_t checks = max_per_tensor == 0 ? n : std::min(n, max_per_tensor);
        for (std::size_t c = 0; c < checks; ++c) {
            const std::size_t i = checks == n ? c : static_cast<std::size_t>(rng.below(n));
            double& x = w.data()[i];
            const double saved = x;
            x = saved + h;
            double up = loss_and_gradient<double>(cfg, params, tokens, rets, mode, nullptr);
            x = saved - h;
            double down = loss_and_gradient<double>(cfg, params, tokens, rets, mode, nullptr);
            x = saved;
            double numeric = (up - down) / (2 * h);
            double an = a.data()[i];
            double rel = std::abs(an - numeric) / std::max({std::abs(an), std::abs(numeric), 1e-2});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_tensor = fmt::format("{}[{}]", name, i);
            }
            ++report.checked;
        }
    });
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: "RLM1", u32 version, config text, then named f32 tensors.

std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& cfg, const Params<float>& params) {
    io::ByteWriter w;
    w.magic("RLM1");
    w.u32(1);
    w.string(cfg.to_text());
    std::uint32_t count = 0;
    params.visit([&](const std::string&, const Mat<float>&) { ++count; });
    w.u32(count);
    params.visit([&](const std::string& name, const Mat<float>& m) {
        w.string(name);
        w.u32(static_cast<std::uint32_t>(m.rows()));
        w.u32(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
    });
    return std::move(w).take();
}

std::pair<ModelConfig, Params<float>> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("RLM1", "checkpoint");
    auto version = r.u32();
    if (version != 1) throw Error(ErrorCode::bad_magic, fmt::format("checkpoint: unsupported version {}", version));
    auto cfg = ModelConfig::from_text(r.string());
    auto params = Params<float>::zeros(cfg);
    std::uint32_t expected = 0;
    params.visit([&](const std::string&, const Mat<float>&) { ++expected; });
    auto count = r.u32();
    if (count != expected) {
        throw Error(ErrorCode::size_mismatch, fmt::format("checkpoint: {} tensors, config implies {}", count, expected));
    }
    params.visit([&](const std::string& name, Mat<float>& m) {
        auto stored = r.string();
        auto rows = r.u32();
        auto cols = r.u32();
        if (stored != name || rows != m.rows() || cols != m.cols()) {
            throw Error(ErrorCode::size_mismatch,
                        fmt::format("checkpoint: tensor '{}' {}x{} where '{}' {}x{} was expected", stored, rows, cols,
                                    name, m.rows(), m.cols()));
        }
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            float v = r.f32();
            if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, fmt::format("checkpoint: non-finite value in '{}'", name));
            m.data()[i] = v;
        }
    });
    if (!r.at_end()) throw Error(ErrorCode::size_mismatch, "checkpoint: trailing bytes");
    return {cfg, std::move(params)};
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Params<float>& params) {
    io::write_file_atomic(path, serialize_checkpoint(cfg, params));
}

std::pair<ModelConfig, Params<float>> load_checkpoint(const std::filesystem::path& path) {
    auto bytes = io::read_file(path);
    return deserialize_checkpoint(bytes);
}

}  // namespace retrobm25::lm
