#include "retrobm25/bm25_index.hpp"

#include <algorithm>
#include <queue>

#include <fmt/core.h>

#include "retrobm25/binary_io.hpp"

namespace retrobm25 {

namespace {
constexpr std::uint32_t kFormatVersion = 1;
}

void BM25Params::validate() const {
    if (!(k1 >= 0.0) || !std::isfinite(k1)) throw Error(ErrorCode::invalid_argument, "bm25: k1 must be >= 0");
    if (!(b >= 0.0 && b <= 1.0)) throw Error(ErrorCode::invalid_argument, "bm25: b must lie in [0, 1]");
}

std::vector<TokenId> query_terms(std::span<const TokenId> tokens) {
    std::vector<TokenId> terms;
    terms.reserve(tokens.size());
    for (auto t : tokens) {
        if (t != kPad) terms.push_back(t);
    }
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    return terms;
}

InvertedIndex InvertedIndex::build(const ChunkStore& store, BM25Params params) {
    params.validate();
    if (store.empty()) throw Error(ErrorCode::empty_corpus, "bm25: cannot index an empty chunk store");

    InvertedIndex index;
    index.params_ = params;
    index.chunk_lengths_.resize(store.size());
    index.postings_.resize(static_cast<std::size_t>(store.max_token_id()) + 1);

    std::uint64_t total = 0;
    std::vector<TokenId> sorted;
    for (ChunkId c = 0; c < store.size(); ++c) {
        auto toks = store.tokens(c);
        sorted.assign(toks.begin(), toks.end() - store.pad_count(c));
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size();) {
            std::size_t j = i;
            while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
            index.postings_[sorted[i]].push_back({c, static_cast<std::uint32_t>(j - i)});
            i = j;
        }
        index.chunk_lengths_[c] = static_cast<std::uint32_t>(sorted.size());
        total += sorted.size();
    }
    index.avgdl_ = static_cast<double>(total) / static_cast<double>(store.size());
    index.idf_.resize(index.postings_.size());
    for (std::size_t t = 0; t < index.postings_.size(); ++t) {
        index.idf_[t] = bm25_idf(store.size(), index.postings_[t].size());
    }
    return index;
}

double InvertedIndex::idf(TokenId term) const {
    if (term >= idf_.size() || postings_[term].empty()) return 0.0;
    return idf_[term];
}

std::size_t InvertedIndex::doc_freq(TokenId term) const {
    return term < postings_.size() ? postings_[term].size() : 0;
}

std::span<const Posting> InvertedIndex::postings(TokenId term) const {
    if (term >= postings_.size()) return {};
    return postings_[term];
}

std::uint32_t InvertedIndex::chunk_length(ChunkId chunk) const {
    if (chunk >= chunk_lengths_.size()) throw Error(ErrorCode::unknown_chunk, fmt::format("unknown chunk {}", chunk));
    return chunk_lengths_[chunk];
}

double InvertedIndex::score(std::span<const TokenId> terms, ChunkId chunk) const {
    auto len = static_cast<double>(chunk_length(chunk));
    double total = 0.0;
    for (auto t : terms) {
        auto list = postings(t);
        auto it = std::lower_bound(list.begin(), list.end(), chunk,
                                   [](const Posting& p, ChunkId c) { return p.chunk_id < c; });
        if (it != list.end() && it->chunk_id == chunk) {
            total += bm25_term_weight(idf_[t], it->term_freq, len, avgdl_, params_);
        }
    }
    return total;
}

std::vector<ScoredChunk> InvertedIndex::topk(std::span<const TokenId> terms, std::size_t k,
                                             const CandidateFilter& filter) const {
    if (k == 0) throw Error(ErrorCode::invalid_argument, "bm25: k must be >= 1");
    if (terms.empty()) return {};

    // Term-at-a-time accumulation over the query's posting lists.
    std::vector<double> acc(num_chunks(), 0.0);
    std::vector<std::uint8_t> touched(num_chunks(), 0);
    std::vector<ChunkId> hits;
    for (auto t : terms) {
        for (const auto& p : postings(t)) {
            if (!filter.admits(p.chunk_id)) continue;
            acc[p.chunk_id] += bm25_term_weight(idf_[t], p.term_freq, chunk_lengths_[p.chunk_id], avgdl_, params_);
            if (!touched[p.chunk_id]) {
                touched[p.chunk_id] = 1;
                hits.push_back(p.chunk_id);
            }
        }
    }

    // Bounded heap whose top is the currently worst-ranked entry.
    std::priority_queue<ScoredChunk, std::vector<ScoredChunk>, decltype(&ranks_before)> heap(&ranks_before);
    for (auto c : hits) {
        ScoredChunk s{c, acc[c]};
        if (heap.size() < k) {
            heap.push(s);
        } else if (ranks_before(s, heap.top())) {
            heap.pop();
            heap.push(s);
        }
    }
    std::vector<ScoredChunk> out;
    out.reserve(heap.size());
    while (!heap.empty()) {
        out.push_back(heap.top());
        heap.pop();
    }
    std::reverse(out.begin(), out.end());

    // Matching chunks all score > 0; pad with zero-score chunks by ascending id.
    for (ChunkId c = 0; out.size() < k && c < num_chunks(); ++c) {
        if (!touched[c] && filter.admits(c)) out.push_back({c, 0.0});
    }
    return out;
}

std::vector<std::uint8_t> InvertedIndex::serialize() const {
    io::ByteWriter w;
    w.magic("BM25");
    w.u32(kFormatVersion);
    w.f64(params_.k1);
    w.f64(params_.b);
    w.u32(static_cast<std::uint32_t>(num_chunks()));
    w.f64(avgdl_);
    for (auto len : chunk_lengths_) w.u32(len);
    std::uint32_t nonempty = 0;
    for (const auto& list : postings_) nonempty += list.empty() ? 0 : 1;
    w.u32(static_cast<std::uint32_t>(postings_.size()));
    w.u32(nonempty);
    for (std::size_t t = 0; t < postings_.size(); ++t) {
        const auto& list = postings_[t];
        if (list.empty()) continue;
        w.u32(static_cast<std::uint32_t>(t));
        w.u32(static_cast<std::uint32_t>(list.size()));
        ChunkId prev = 0;
        for (const auto& p : list) {
            w.varint(p.chunk_id - prev);
            w.varint(p.term_freq);
            prev = p.chunk_id;
        }
    }
    return std::move(w).take();
}

InvertedIndex InvertedIndex::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("BM25", "BM25 index");
    auto version = r.u32();
    if (version != kFormatVersion) {
        throw Error(ErrorCode::bad_magic, fmt::format("unsupported BM25 index version {}", version));
    }
    InvertedIndex index;
    index.params_.k1 = r.f64();
    index.params_.b = r.f64();
    index.params_.validate();
    auto n = r.u32();
    index.avgdl_ = r.f64();
    index.chunk_lengths_.resize(n);
    for (auto& len : index.chunk_lengths_) len = r.u32();
    auto table_size = r.u32();
    auto nonempty = r.u32();
    index.postings_.resize(table_size);
    for (std::uint32_t i = 0; i < nonempty; ++i) {
        auto term = r.u32();
        auto count = r.u32();
        if (term >= table_size) throw Error(ErrorCode::size_mismatch, "bm25: term id outside table");
        auto& list = index.postings_[term];
        list.reserve(count);
        std::uint64_t id = 0;
        for (std::uint32_t j = 0; j < count; ++j) {
            id += r.varint();
            auto tf = r.varint();
            if (id >= n || tf == 0) throw Error(ErrorCode::size_mismatch, "bm25: corrupt posting list");
            list.push_back({static_cast<ChunkId>(id), static_cast<std::uint32_t>(tf)});
        }
    }
    if (!r.at_end()) throw Error(ErrorCode::size_mismatch, "trailing bytes after BM25 index");
    index.idf_.resize(table_size);
    for (std::size_t t = 0; t < table_size; ++t) index.idf_[t] = bm25_idf(n, index.postings_[t].size());
    return index;
}

void InvertedIndex::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

}  // namespace retrobm25
