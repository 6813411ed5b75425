#include "retrobm25/corpus.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <unordered_set>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "retrobm25/binary_io.hpp"
#include "retrobm25/parallel.hpp"

namespace retrobm25 {

namespace {

// Byte length of the Unicode whitespace sequence starting at text[i], or 0.
std::size_t whitespace_at(std::string_view text, std::size_t i) {
    auto c = static_cast<unsigned char>(text[i]);
    if (c == ' ' || (c >= '\t' && c <= '\r')) return 1;
    if (c < 0xC2) return 0;
    auto byte = [&](std::size_t k) -> unsigned {
        return i + k < text.size() ? static_cast<unsigned char>(text[i + k]) : 0u;
    };
    if (c == 0xC2 && (byte(1) == 0x85 || byte(1) == 0xA0)) return 2;
    if (c == 0xE1 && byte(1) == 0x9A && byte(2) == 0x80) return 3;  // U+1680
    if (c == 0xE2 && byte(1) == 0x80) {
        unsigned b = byte(2);
        if ((b >= 0x80 && b <= 0x8A) || b == 0xA8 || b == 0xA9 || b == 0xAF) return 3;
    }
    if (c == 0xE2 && byte(1) == 0x81 && byte(2) == 0x9F) return 3;  // U+205F
    if (c == 0xE3 && byte(1) == 0x80 && byte(2) == 0x80) return 3;  // U+3000
    return 0;
}

bool is_word_char(char ch) {
    auto c = static_cast<unsigned char>(ch);
    return c >= 0x80 || (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

char ascii_lower(char ch) { return (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch; }

void emit_word(std::string_view word, std::vector<std::string>& out) {
    std::size_t lo = 0;
    std::size_t hi = word.size();
    while (lo < hi && !is_word_char(word[lo])) ++lo;
    while (hi > lo && !is_word_char(word[hi - 1])) --hi;
    for (std::size_t i = 0; i < lo; ++i) out.emplace_back(1, word[i]);
    if (hi > lo) {
        std::string core(word.substr(lo, hi - lo));
        std::transform(core.begin(), core.end(), core.begin(), ascii_lower);
        out.push_back(std::move(core));
    }
    for (std::size_t i = hi; i < word.size(); ++i) out.emplace_back(1, word[i]);
}

bool blank(std::string_view s) {
    for (std::size_t i = 0; i < s.size();) {
        auto w = whitespace_at(s, i);
        if (w == 0) return false;
        i += w;
    }
    return true;
}

}  // namespace

std::vector<std::string> surface_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        if (auto w = whitespace_at(text, i)) {
            if (i > start) emit_word(text.substr(start, i - start), out);
            i += w;
            start = i;
        } else {
            ++i;
        }
    }
    if (start < text.size()) emit_word(text.substr(start), out);
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : tokens_{std::string(kPadToken), std::string(kUnkToken)} {
    ids_.emplace(tokens_[0], kPad);
    ids_.emplace(tokens_[1], kUnk);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
        throw Error(ErrorCode::invalid_argument, "vocabulary must start with <pad> and <unk>");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.ids_.clear();
    v.ids_.reserve(v.tokens_.size());
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.ids_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
            throw Error(ErrorCode::invalid_argument, fmt::format("duplicate vocabulary entry '{}'", v.tokens_[i]));
        }
    }
    return v;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
    std::vector<std::string> tokens;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        tokens.emplace_back(text.substr(start, end - start));
        start = end + 1;
    }
    return from_tokens(std::move(tokens));
}

std::string Vocabulary::to_text() const {
    std::string out;
    for (const auto& t : tokens_) {
        out += t;
        out += '\n';
    }
    return out;
}

TokenId Vocabulary::id_of(std::string_view token) const { return find(token).value_or(kUnk); }

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id >= tokens_.size()) throw Error(ErrorCode::invalid_argument, fmt::format("token id {} out of range", id));
    return tokens_[id];
}

Vocabulary build_vocabulary(std::span<const Document> corpus, std::size_t max_size) {
    if (corpus.empty()) throw Error(ErrorCode::empty_corpus, "empty corpus");
    if (max_size < 2) throw Error(ErrorCode::invalid_argument, "vocabulary max_size must be >= 2");

    std::vector<std::map<std::string, std::uint64_t>> partial(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) {
        for (auto& t : surface_tokens(corpus[i].text)) ++partial[i][t];
    });
    std::map<std::string, std::uint64_t> counts;
    for (auto& p : partial) {
        for (auto& [tok, n] : p) counts[tok] += n;
    }
    counts.erase(std::string(Vocabulary::kPadToken));
    counts.erase(std::string(Vocabulary::kUnkToken));

    std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (ranked.size() > max_size - 2) ranked.resize(max_size - 2);

    std::vector<std::string> tokens{std::string(Vocabulary::kPadToken), std::string(Vocabulary::kUnkToken)};
    for (auto& [tok, n] : ranked) tokens.push_back(std::move(tok));
    return Vocabulary::from_tokens(std::move(tokens));
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
    std::vector<TokenId> ids;
    for (const auto& t : surface_tokens(text)) ids.push_back(vocab.id_of(t));
    return ids;
}

// ---------------------------------------------------------------------------
// Chunking

std::vector<Chunk> chunk_tokens(std::string_view doc_id, std::span<const TokenId> tokens, std::size_t m,
                                ChunkId first_id) {
    if (m < 2) throw Error(ErrorCode::invalid_argument, "chunk size must be >= 2");
    std::vector<Chunk> chunks;
    for (std::size_t start = 0, ord = 0; start < tokens.size(); start += m, ++ord) {
        Chunk c;
        c.chunk_id = first_id + static_cast<ChunkId>(ord);
        c.doc_id = std::string(doc_id);
        c.ordinal = static_cast<std::uint32_t>(ord);
        auto n = std::min(m, tokens.size() - start);
        c.token_ids.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                           tokens.begin() + static_cast<std::ptrdiff_t>(start + n));
        c.pad_count = static_cast<std::uint32_t>(m - n);
        c.token_ids.resize(m, kPad);
        chunks.push_back(std::move(c));
    }
    return chunks;
}

std::vector<Chunk> chunk_document(const Document& doc, const Vocabulary& vocab, std::size_t m) {
    auto ids = tokenize(doc.text, vocab);
    return chunk_tokens(doc.doc_id, ids, m);
}

// ---------------------------------------------------------------------------
// ChunkStore

ChunkStore::ChunkStore(std::size_t m) : m_(m) {
    if (m < 2) throw Error(ErrorCode::invalid_argument, "chunk size must be >= 2");
}

void ChunkStore::add_document(std::string doc_id, std::span<const TokenId> tokens) {
    if (doc_lookup_.contains(doc_id)) {
        throw Error(ErrorCode::invalid_argument, fmt::format("duplicate doc_id '{}'", doc_id));
    }
    if (std::find(tokens.begin(), tokens.end(), kPad) != tokens.end()) {
        throw Error(ErrorCode::invalid_argument, fmt::format("document '{}' contains PAD tokens", doc_id));
    }
    auto doc_index = static_cast<std::uint32_t>(doc_ids_.size());
    ChunkRange range{static_cast<ChunkId>(meta_.size()), 0};
    for (std::size_t start = 0, ord = 0; start < tokens.size(); start += m_, ++ord) {
        auto n = std::min(m_, tokens.size() - start);
        tokens_.insert(tokens_.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start),
                       tokens.begin() + static_cast<std::ptrdiff_t>(start + n));
        tokens_.resize(tokens_.size() + (m_ - n), kPad);
        meta_.push_back({doc_index, static_cast<std::uint32_t>(ord), static_cast<std::uint32_t>(m_ - n)});
        ++range.count;
    }
    for (auto t : tokens) max_token_ = std::max(max_token_, t);
    doc_lookup_.emplace(doc_id, doc_index);
    doc_ids_.push_back(std::move(doc_id));
    doc_ranges_.push_back(range);
}

void ChunkStore::check(ChunkId id) const {
    if (id >= meta_.size()) throw Error(ErrorCode::unknown_chunk, fmt::format("unknown chunk {}", id));
}

Chunk ChunkStore::chunk(ChunkId id) const {
    check(id);
    const auto& meta = meta_[id];
    auto toks = tokens(id);
    return Chunk{id, doc_ids_[meta.doc_index], meta.ordinal, {toks.begin(), toks.end()}, meta.pad_count};
}

std::span<const TokenId> ChunkStore::tokens(ChunkId id) const {
    check(id);
    return std::span(tokens_).subspan(static_cast<std::size_t>(id) * m_, m_);
}

std::uint32_t ChunkStore::pad_count(ChunkId id) const {
    check(id);
    return meta_[id].pad_count;
}

std::uint32_t ChunkStore::ordinal(ChunkId id) const {
    check(id);
    return meta_[id].ordinal;
}

std::uint32_t ChunkStore::doc_index(ChunkId id) const {
    check(id);
    return meta_[id].doc_index;
}

const std::string& ChunkStore::doc_id(ChunkId id) const { return doc_ids_[doc_index(id)]; }

std::optional<std::uint32_t> ChunkStore::find_document(std::string_view doc_id) const {
    auto it = doc_lookup_.find(std::string(doc_id));
    if (it == doc_lookup_.end()) return std::nullopt;
    return it->second;
}

std::optional<ChunkRange> ChunkStore::document_range(std::string_view doc_id) const {
    auto idx = find_document(doc_id);
    if (!idx) return std::nullopt;
    return doc_ranges_[*idx];
}

std::vector<TokenId> ChunkStore::document_tokens(std::uint32_t doc_index) const {
    auto range = doc_ranges_.at(doc_index);
    std::vector<TokenId> out;
    for (ChunkId id = range.first; id < range.first + range.count; ++id) {
        auto toks = tokens(id);
        out.insert(out.end(), toks.begin(), toks.end() - meta_[id].pad_count);
    }
    return out;
}

Chunk ChunkStore::continuation(ChunkId id) const {
    check(id);
    const auto& meta = meta_[id];
    if (doc_ranges_[meta.doc_index].contains(id + 1)) return chunk(id + 1);
    return Chunk{kNoChunk, doc_ids_[meta.doc_index], meta.ordinal + 1, std::vector<TokenId>(m_, kPad),
                 static_cast<std::uint32_t>(m_)};
}

std::vector<std::uint8_t> ChunkStore::serialize() const {
    io::ByteWriter w;
    w.magic("CHK1");
    w.u32(static_cast<std::uint32_t>(m_));
    w.u32(static_cast<std::uint32_t>(meta_.size()));
    for (std::size_t i = 0; i < meta_.size(); ++i) {
        w.u32(meta_[i].doc_index);
        w.u32(meta_[i].ordinal);
        w.u32(meta_[i].pad_count);
        for (std::size_t j = 0; j < m_; ++j) w.u32(tokens_[i * m_ + j]);
    }
    w.u32(static_cast<std::uint32_t>(doc_ids_.size()));
    for (const auto& id : doc_ids_) w.string(id);
    return std::move(w).take();
}

ChunkStore ChunkStore::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("CHK1", "chunk store");
    auto m = r.u32();
    auto n = r.u32();
    struct Row {
        Meta meta;
        std::vector<TokenId> tokens;
    };
    std::vector<Row> rows(n);
    for (auto& row : rows) {
        row.meta.doc_index = r.u32();
        row.meta.ordinal = r.u32();
        row.meta.pad_count = r.u32();
        row.tokens.resize(m);
        for (auto& t : row.tokens) t = r.u32();
    }
    auto ndocs = r.u32();
    std::vector<std::string> names(ndocs);
    for (auto& s : names) s = r.string();
    if (!r.at_end()) throw Error(ErrorCode::size_mismatch, "trailing bytes after chunk store");

    // Rebuild through add_document so every invariant is re-checked on load.
    std::vector<std::vector<TokenId>> doc_tokens(ndocs);
    std::vector<std::uint32_t> expected_ordinal(ndocs, 0);
    std::uint32_t last_doc = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto& row = rows[i];
        if (row.meta.doc_index >= ndocs || row.meta.pad_count >= m ||
            row.meta.ordinal != expected_ordinal[row.meta.doc_index] || row.meta.doc_index < last_doc) {
            throw Error(ErrorCode::size_mismatch, fmt::format("inconsistent chunk record {}", i));
        }
        last_doc = row.meta.doc_index;
        ++expected_ordinal[row.meta.doc_index];
        auto& dst = doc_tokens[row.meta.doc_index];
        dst.insert(dst.end(), row.tokens.begin(), row.tokens.end() - row.meta.pad_count);
    }
    ChunkStore store(m);
    for (std::uint32_t d = 0; d < ndocs; ++d) store.add_document(std::move(names[d]), doc_tokens[d]);
    for (std::uint32_t i = 0; i < n; ++i) {
        if (store.meta_[i].pad_count != rows[i].meta.pad_count) {
            throw Error(ErrorCode::size_mismatch, fmt::format("padding mismatch in chunk {}", i));
        }
    }
    return store;
}

void ChunkStore::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

ChunkStore ChunkStore::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

ChunkStore build_chunk_store(std::span<const Document> docs, const Vocabulary& vocab, std::size_t m) {
    std::vector<std::vector<TokenId>> ids(docs.size());
    parallel_for(docs.size(), [&](std::size_t i) { ids[i] = tokenize(docs[i].text, vocab); });
    ChunkStore store(m);
    for (std::size_t i = 0; i < docs.size(); ++i) store.add_document(docs[i].doc_id, ids[i]);
    return store;
}

// ---------------------------------------------------------------------------
// Corpus input

std::vector<CorpusRecord> read_corpus_jsonl(std::istream& in) {
    std::vector<CorpusRecord> out;
    std::unordered_set<std::string> seen;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (blank(line)) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::invalid_argument, fmt::format("corpus line {}: {}", lineno, e.what()));
        }
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
            throw Error(ErrorCode::invalid_argument, fmt::format("corpus line {}: missing string \"id\"", lineno));
        }
        CorpusRecord rec;
        rec.id = j["id"].get<std::string>();
        if (!seen.insert(rec.id).second) {
            throw Error(ErrorCode::invalid_argument, fmt::format("corpus line {}: duplicate id '{}'", lineno, rec.id));
        }
        if (j.contains("text")) {
            if (!j["text"].is_string()) {
                throw Error(ErrorCode::invalid_argument, fmt::format("corpus line {}: \"text\" not a string", lineno));
            }
            rec.text = j["text"].get<std::string>();
            if (blank(*rec.text)) {
                throw Error(ErrorCode::invalid_argument, fmt::format("corpus line {}: blank text", lineno));
            }
        } else if (j.contains("tokens")) {
            std::vector<TokenId> toks;
            for (const auto& t : j["tokens"]) {
                if (!t.is_number_unsigned()) {
                    throw Error(ErrorCode::invalid_argument,
                                fmt::format("corpus line {}: tokens must be non-negative integers", lineno));
                }
                toks.push_back(t.get<TokenId>());
            }
            rec.tokens = std::move(toks);
        } else {
            throw Error(ErrorCode::invalid_argument, fmt::format("corpus line {}: needs \"text\" or \"tokens\"", lineno));
        }
        if (j.contains("split")) rec.split = j["split"].get<std::string>();
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace retrobm25
