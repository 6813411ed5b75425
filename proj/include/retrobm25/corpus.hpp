#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "retrobm25/common.hpp"

namespace retrobm25 {

struct Document {
    std::string doc_id;
    std::string text;
};

/// One line of a corpus file: either raw text or pre-tokenized ids.
struct CorpusRecord {
    std::string id;
    std::optional<std::string> text;
    std::optional<std::vector<TokenId>> tokens;
    /// Optional "split" field; anything other than "train" is held out of training.
    std::string split = "train";
};

/// Parses the JSON-lines corpus format. Blank lines are skipped. Enforces unique
/// ids and non-blank text.
std::vector<CorpusRecord> read_corpus_jsonl(std::istream& in);

class Vocabulary {
  public:
    static constexpr std::size_t kDefaultMaxSize = 32000;
    static constexpr std::string_view kPadToken = "<pad>";
    static constexpr std::string_view kUnkToken = "<unk>";

    Vocabulary();

    /// Rebuilds from an id-ordered token list whose first two entries are PAD and UNK.
    static Vocabulary from_tokens(std::vector<std::string> tokens);
    /// One token per line, line number = id.
    static Vocabulary from_text(std::string_view text);
    std::string to_text() const;

    /// UNK when absent.
    TokenId id_of(std::string_view token) const;
    std::optional<TokenId> find(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t size() const noexcept { return tokens_.size(); }
    std::span<const std::string> tokens() const noexcept { return tokens_; }

  private:
    struct Hash {
        using is_transparent = void;
        std::size_t operator()(std::string_view s) const noexcept { return std::hash<std::string_view>{}(s); }
    };

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId, Hash, std::equal_to<>> ids_;
};

/// Surface tokenization: lowercase, split on whitespace, then peel leading and
/// trailing non-alphanumeric characters off each word as one-character tokens.
/// Bytes >= 0x80 (non-ASCII UTF-8) count as alphanumeric and are kept verbatim.
std::vector<std::string> surface_tokens(std::string_view text);

/// Keeps the max_size-2 most frequent surface tokens (ties: lexicographic) plus PAD/UNK.
Vocabulary build_vocabulary(std::span<const Document> corpus, std::size_t max_size = Vocabulary::kDefaultMaxSize);

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);

struct Chunk {
    ChunkId chunk_id = 0;
    std::string doc_id;
    std::uint32_t ordinal = 0;
    std::vector<TokenId> token_ids;
    std::uint32_t pad_count = 0;

    /// Non-PAD prefix.
    std::span<const TokenId> content() const noexcept {
        return std::span(token_ids).first(token_ids.size() - pad_count);
    }
    std::size_t length() const noexcept { return token_ids.size() - pad_count; }
};

/// Splits a token sequence into ceil(len/m) chunks, right-padding the last.
/// Chunk ids are assigned consecutively from first_id.
std::vector<Chunk> chunk_tokens(std::string_view doc_id, std::span<const TokenId> tokens, std::size_t m,
                                ChunkId first_id = 0);
std::vector<Chunk> chunk_document(const Document& doc, const Vocabulary& vocab, std::size_t m);

/// Immutable-once-built sequence of chunks in corpus order. Chunks of a document
/// are contiguous, so a document resolves to a ChunkRange.
class ChunkStore {
  public:
    explicit ChunkStore(std::size_t m = 64);

    /// Appends a document's chunks. Zero tokens registers the document with no chunks.
    void add_document(std::string doc_id, std::span<const TokenId> tokens);

    std::size_t chunk_size() const noexcept { return m_; }
    std::size_t size() const noexcept { return meta_.size(); }
    bool empty() const noexcept { return meta_.empty(); }
    std::size_t num_documents() const noexcept { return doc_ids_.size(); }

    Chunk chunk(ChunkId id) const;
    std::span<const TokenId> tokens(ChunkId id) const;
    std::uint32_t pad_count(ChunkId id) const;
    std::uint32_t ordinal(ChunkId id) const;
    std::uint32_t doc_index(ChunkId id) const;
    const std::string& doc_id(ChunkId id) const;

    const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }
    ChunkRange document_range(std::uint32_t doc_index) const { return doc_ranges_.at(doc_index); }
    std::optional<ChunkRange> document_range(std::string_view doc_id) const;
    std::optional<std::uint32_t> find_document(std::string_view doc_id) const;
    /// Non-PAD tokens of a document, in order.
    std::vector<TokenId> document_tokens(std::uint32_t doc_index) const;

    /// Next chunk of the same document, or an all-PAD chunk (id kNoChunk) after the last.
    Chunk continuation(ChunkId id) const;

    TokenId max_token_id() const noexcept { return max_token_; }

    std::vector<std::uint8_t> serialize() const;
    static ChunkStore deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static ChunkStore load(const std::filesystem::path& path);

  private:
    struct Meta {
        std::uint32_t doc_index;
        std::uint32_t ordinal;
        std::uint32_t pad_count;
    };

    void check(ChunkId id) const;

    std::size_t m_;
    std::vector<TokenId> tokens_;
    std::vector<Meta> meta_;
    std::vector<std::string> doc_ids_;
    std::vector<ChunkRange> doc_ranges_;
    std::unordered_map<std::string, std::uint32_t> doc_lookup_;
    TokenId max_token_ = kUnk;
};

/// Tokenizes documents in parallel and appends them in input order.
ChunkStore build_chunk_store(std::span<const Document> docs, const Vocabulary& vocab, std::size_t m);

}  // namespace retrobm25
