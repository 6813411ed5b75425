#include "retrobm25/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "retrobm25/random.hpp"

namespace retrobm25 {

void CopyCorpusConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_argument, "copy corpus: " + msg); };
    if (pairs == 0) fail("pairs must be >= 1");
    if (eval_pairs > pairs) fail("eval_pairs must be <= pairs");
    if (min_chunks == 0 || min_chunks > max_chunks) fail("need 1 <= min_chunks <= max_chunks");
    if (chunk_size < 2) fail("chunk_size must be >= 2");
    if (words < 2) fail("words must be >= 2");
    if (!(zipf_exponent >= 0.0)) fail("zipf_exponent must be >= 0");
    if (!(substitution >= 0.0 && substitution <= 1.0)) fail("substitution must be in [0, 1]");
}

std::vector<CorpusRecord> make_copy_corpus(const CopyCorpusConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<double> cdf(cfg.words);
    double total = 0.0;
    for (std::size_t r = 0; r < cfg.words; ++r) {
        total += 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
        cdf[r] = total;
    }
    auto word = [&] {
        auto it = std::upper_bound(cdf.begin(), cdf.end(), rng.uniform() * total);
        auto r = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cfg.words - 1);
        return fmt::format("w{:04d}", r);
    };
    auto join = [](const std::vector<std::string>& ws) {
        std::string s;
        for (const auto& w : ws) {
            if (!s.empty()) s += ' ';
            s += w;
        }
        return s;
    };

    std::vector<CorpusRecord> out;
    out.reserve(2 * cfg.pairs);
    for (std::size_t p = 0; p < cfg.pairs; ++p) {
        auto chunks = cfg.min_chunks + rng.below(cfg.max_chunks - cfg.min_chunks + 1);
        // Last chunk holds between m/2 and m tokens.
        auto len = (chunks - 1) * cfg.chunk_size + cfg.chunk_size / 2 + rng.below(cfg.chunk_size - cfg.chunk_size / 2 + 1);
        std::vector<std::string> original(len);
        for (auto& w : original) w = word();
        std::vector<std::string> twin = original;
        for (auto& w : twin) {
            if (rng.uniform() < cfg.substitution) w = word();
        }
        CorpusRecord a;
        a.id = fmt::format("doc{:04d}a", p);
        a.text = join(original);
        a.split = p < cfg.eval_pairs ? "eval" : "train";
        CorpusRecord b;
        b.id = fmt::format("doc{:04d}b", p);
        b.text = join(twin);
        out.push_back(std::move(a));
        out.push_back(std::move(b));
    }
    return out;
}

std::string to_jsonl(std::span<const CorpusRecord> records) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j;
        j["id"] = r.id;
        if (r.text) j["text"] = *r.text;
        if (r.tokens) j["tokens"] = *r.tokens;
        j["split"] = r.split;
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace retrobm25
