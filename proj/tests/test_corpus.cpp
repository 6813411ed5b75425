#include <gtest/gtest.h>

#include <sstream>

#include "retrobm25/corpus.hpp"

using namespace retrobm25;

namespace {

std::vector<TokenId> iota_tokens(std::size_t n) {
    std::vector<TokenId> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<TokenId>(2 + i % 50);
    return t;
}

TEST(BuildVocabulary, FrequencyOrder) {
    std::vector<Document> corpus{{"d0", "a b a"}};
    auto v = build_vocabulary(corpus, 4);
    ASSERT_EQ(v.size(), 4u);
    EXPECT_EQ(v.token(0), "<pad>");
    EXPECT_EQ(v.token(1), "<unk>");
    EXPECT_EQ(v.token(2), "a");
    EXPECT_EQ(v.token(3), "b");
}

TEST(BuildVocabulary, FrequencyBeatsLexicographicTies) {
    std::vector<Document> corpus{{"d0", "x y"}, {"d1", "y z"}};
    auto v = build_vocabulary(corpus, 3);
    ASSERT_EQ(v.size(), 3u);
    EXPECT_EQ(v.token(2), "y");
}

TEST(BuildVocabulary, TiesAreLexicographic) {
    std::vector<Document> corpus{{"d0", "q p r"}};
    auto v = build_vocabulary(corpus, 4);
    EXPECT_EQ(v.token(2), "p");
    EXPECT_EQ(v.token(3), "q");
}

TEST(BuildVocabulary, EmptyCorpusThrows) {
    std::vector<Document> corpus;
    EXPECT_THROW(build_vocabulary(corpus, 10), Error);
}

TEST(Tokenize, Lookup) {
    std::vector<Document> corpus{{"d0", "a b a"}};
    auto v = build_vocabulary(corpus, 4);
    EXPECT_EQ(tokenize("a b a", v), (std::vector<TokenId>{2, 3, 2}));
    EXPECT_EQ(tokenize("a q", v), (std::vector<TokenId>{2, 1}));
    EXPECT_TRUE(tokenize("", v).empty());
}

TEST(Tokenize, SurfaceRule) {
    EXPECT_EQ(surface_tokens("Hello, (World)!"),
              (std::vector<std::string>{"hello", ",", "(", "world", ")", "!"}));
    EXPECT_EQ(surface_tokens("  don't  "), (std::vector<std::string>{"don't"}));
    EXPECT_TRUE(surface_tokens(" \t\n").empty());
}

TEST(Vocabulary, TextRoundTrip) {
    std::vector<Document> corpus{{"d0", "the cat sat on the mat"}};
    auto v = build_vocabulary(corpus);
    auto back = Vocabulary::from_text(v.to_text());
    ASSERT_EQ(back.size(), v.size());
    for (TokenId i = 0; i < v.size(); ++i) EXPECT_EQ(back.token(i), v.token(i));
    EXPECT_EQ(back.id_of("cat"), v.id_of("cat"));
}

TEST(ChunkDocument, PadsLastChunk) {
    auto chunks = chunk_tokens("d", iota_tokens(130), 64);
    ASSERT_EQ(chunks.size(), 3u);
    EXPECT_EQ(chunks[2].pad_count, 62u);
    EXPECT_EQ(chunks[0].pad_count, 0u);
    for (std::uint32_t i = 0; i < 3; ++i) {
        EXPECT_EQ(chunks[i].ordinal, i);
        EXPECT_EQ(chunks[i].token_ids.size(), 64u);
    }
}

TEST(ChunkDocument, ExactFitAndEmpty) {
    auto one = chunk_tokens("d", iota_tokens(64), 64);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].pad_count, 0u);
    EXPECT_TRUE(chunk_tokens("d", {}, 64).empty());
}

TEST(ChunkDocument, RejectsTinyChunkSize) { EXPECT_THROW(chunk_tokens("d", iota_tokens(4), 1), Error); }

TEST(Continuation, NextChunkOrPad) {
    ChunkStore store(64);
    store.add_document("D", iota_tokens(150));
    store.add_document("E", iota_tokens(10));
    auto next = store.continuation(0);
    EXPECT_EQ(next.doc_id, "D");
    EXPECT_EQ(next.ordinal, 1u);
    auto tail = store.continuation(2);
    EXPECT_EQ(tail.doc_id, "D");
    EXPECT_EQ(tail.pad_count, 64u);
    EXPECT_EQ(tail.chunk_id, kNoChunk);
    for (auto t : tail.token_ids) EXPECT_EQ(t, kPad);
    EXPECT_THROW(store.continuation(static_cast<ChunkId>(store.size())), Error);
}

TEST(ChunkStore, RoundTripReproducesTokenization) {
    std::vector<Document> docs{{"a", "one two three four five six seven"}, {"b", "x"}, {"c", "two two three"}};
    auto vocab = build_vocabulary(docs);
    auto store = build_chunk_store(docs, vocab, 3);
    for (std::uint32_t d = 0; d < docs.size(); ++d) {
        EXPECT_EQ(store.document_tokens(d), tokenize(docs[d].text, vocab));
    }
    EXPECT_EQ(store.size(), 3u + 1u + 1u);
    auto range = store.document_range("a");
    ASSERT_TRUE(range);
    EXPECT_EQ(range->first, 0u);
    EXPECT_EQ(range->count, 3u);
}

TEST(ChunkStore, SerializationIsDeterministic) {
    std::vector<Document> docs{{"a", "one two three four five"}, {"b", "six seven"}};
    auto vocab = build_vocabulary(docs);
    auto s1 = build_chunk_store(docs, vocab, 2).serialize();
    auto s2 = build_chunk_store(docs, vocab, 2).serialize();
    EXPECT_EQ(s1, s2);
    EXPECT_EQ(s1[0], 'C');
    auto back = ChunkStore::deserialize(s1);
    EXPECT_EQ(back.serialize(), s1);
    EXPECT_EQ(back.doc_id(3), "b");
}

TEST(ChunkStore, PadOnlyTrailing) {
    ChunkStore store(8);
    store.add_document("a", iota_tokens(21));
    for (ChunkId c = 0; c < store.size(); ++c) {
        auto t = store.tokens(c);
        std::size_t content = t.size() - store.pad_count(c);
        for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i] == kPad, i >= content);
        if (c + 1 < store.size()) EXPECT_EQ(store.pad_count(c), 0u);
    }
}

TEST(ChunkStore, TruncatedFileThrows) {
    ChunkStore store(4);
    store.add_document("a", iota_tokens(9));
    auto bytes = store.serialize();
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(ChunkStore::deserialize(bytes), Error);
}

TEST(CorpusJsonl, TextAndTokens) {
    std::istringstream in(R"({"id":"a","text":"hello world"}

{"id":"b","tokens":[5,6,7],"split":"eval"}
)");
    auto recs = read_corpus_jsonl(in);
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(*recs[0].text, "hello world");
    EXPECT_EQ(*recs[1].tokens, (std::vector<TokenId>{5, 6, 7}));
    EXPECT_EQ(recs[1].split, "eval");
}

TEST(CorpusJsonl, Errors) {
    std::istringstream dup(R"({"id":"a","text":"x"}
{"id":"a","text":"y"})");
    EXPECT_THROW(read_corpus_jsonl(dup), Error);
    std::istringstream blank(R"({"id":"a","text":"   "})");
    EXPECT_THROW(read_corpus_jsonl(blank), Error);
    std::istringstream broken("{not json");
    EXPECT_THROW(read_corpus_jsonl(broken), Error);
}

}  // namespace
