#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "desklm/base64.hpp"
#include "desklm/rng.hpp"
#include "desklm/tokenizer.hpp"

using namespace desklm;

namespace {

std::string byte_rank_lines() {
    std::string out;
    for (int b = 0; b < 256; ++b)
        out += b64::encode(std::string(1, char(b))) + " " + std::to_string(b) + "\n";
    return out;
}

std::string random_bytes(Rng& rng, size_t max_len) {
    const size_t len = size_t(rng.below(max_len + 1));
    std::string s(len, '\0');
    for (auto& c : s) c = char(rng.below(256));
    return s;
}

// Repetitive pseudo-text over a fixed word inventory; rich enough in pair
// statistics to support over a thousand merges.
std::string synthetic_corpus(size_t sentences, uint64_t seed) {
    Rng rng(seed);
    std::vector<std::string> words;
    const char alphabet[] = "abcdefghijklmnopqrstuvwxyz";
    for (size_t w = 0; w < 300; ++w) {
        std::string word;
        const size_t len = 2 + rng.below(8);
        for (size_t i = 0; i < len; ++i) word += alphabet[rng.below(26)];
        words.push_back(word);
    }
    std::string text;
    for (size_t s = 0; s < sentences; ++s) {
        const size_t n = 4 + rng.below(10);
        for (size_t i = 0; i < n; ++i) {
            if (i) text += ' ';
            text += words[rng.below(words.size())];
        }
        text += rng.below(5) == 0 ? "!\n" : ".\n";
    }
    return text;
}

} // namespace

TEST_CASE("byte-complete rank file loads with specials after the base ids") {
    const auto v = tok::vocabulary_from_rank_lines(byte_rank_lines(), {"<|endoftext|>"});
    CHECK(v.base_vocab_size() == 256);
    CHECK(v.special_id("<|endoftext|>") == 256);
    CHECK(v.total_size() == 257);
}

TEST_CASE("rank file integrity and parse errors") {
    SUBCASE("duplicate rank") {
        std::string lines = byte_rank_lines();
        lines += b64::encode("ab") + " 7\n"; // rank 7 already taken
        CHECK_THROWS_AS(tok::vocabulary_from_rank_lines(lines, {}), IntegrityError);
    }
    SUBCASE("missing single byte") {
        std::string lines;
        for (int b = 0; b < 255; ++b)
            lines += b64::encode(std::string(1, char(b))) + " " + std::to_string(b) + "\n";
        lines += b64::encode("xy") + " 255\n";
        CHECK_THROWS_AS(tok::vocabulary_from_rank_lines(lines, {}), IntegrityError);
    }
    SUBCASE("malformed line reports its number") {
        std::string lines = byte_rank_lines();
        lines += "not base64 rank\n";
        try {
            tok::vocabulary_from_rank_lines(lines, {});
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("257") != std::string::npos);
        }
    }
    SUBCASE("non-dense ranks") {
        std::string lines = byte_rank_lines();
        lines += b64::encode("ab") + " 300\n"; // gap at 256..299
        CHECK_THROWS_AS(tok::vocabulary_from_rank_lines(lines, {}), IntegrityError);
    }
}

TEST_CASE("pretokenize splits digits and groups words") {
    using V = std::vector<std::string>;
    CHECK(tok::pretokenize("12345") == V{"1", "2", "3", "4", "5"});
    CHECK(tok::pretokenize("") == V{});
    CHECK(tok::pretokenize("abc 42") == V{"abc", " ", "4", "2"});
    CHECK(tok::pretokenize("hello world") == V{"hello", " world"});
    CHECK(tok::pretokenize("a1b") == V{"a", "1", "b"});
    CHECK(tok::pretokenize("x  y") == V{"x", " ", " y"});
    CHECK(tok::pretokenize("hi, there!") == V{"hi", ",", " there", "!"});
    CHECK(tok::pretokenize("line\nnext") == V{"line", "\n", "next"});
}

TEST_CASE("pretokenize partitions the input bytes") {
    Rng rng(41);
    for (int i = 0; i < 500; ++i) {
        const std::string s = random_bytes(rng, 200);
        std::string joined;
        for (const auto& c : tok::pretokenize(s)) joined += c;
        REQUIRE(joined == s);
    }
}

TEST_CASE("encode without merges emits raw bytes") {
    const auto v = tok::byte_vocabulary();
    const auto ts = tok::encode(v, "hi");
    CHECK(ts.ids == std::vector<int>{'h', 'i'});
    CHECK(ts.byte_len == 2);
}

TEST_CASE("encode applies the lowest-rank merge repeatedly") {
    auto v = tok::byte_vocabulary();
    v.merges.emplace("ab", 256);
    v.id_to_bytes.push_back("ab");
    CHECK(tok::encode(v, "abab").ids == std::vector<int>{256, 256});
}

TEST_CASE("decode edge cases") {
    const auto v = tok::byte_vocabulary({"<|endoftext|>"});
    CHECK(tok::decode(v, {}) == "");
    CHECK(tok::decode(v, {256}) == "<|endoftext|>");
    CHECK_THROWS_AS(tok::decode(v, {1000000000}), DomainError);
}

TEST_CASE("special tokens encode to single ids only when allowed") {
    const auto v = tok::byte_vocabulary({"<|endoftext|>", "<|im_start|>"});
    const std::string text = "a<|endoftext|>b";
    const auto with = tok::encode(v, text, true);
    CHECK(with.ids == std::vector<int>{'a', 256, 'b'});
    const auto without = tok::encode(v, text, false);
    CHECK(without.ids.size() == text.size()); // every byte separate
    CHECK(tok::decode(v, without.ids) == text);
}

TEST_CASE("round trip on random byte strings") {
    const auto vocab = tok::train_vocabulary({synthetic_corpus(300, 3)}, 500, {"<|endoftext|>"});
    Rng rng(42);
    for (int i = 0; i < 2000; ++i) {
        const std::string s = random_bytes(rng, 512);
        const auto ids = tok::encode(vocab, s).ids;
        REQUIRE(tok::decode(vocab, ids) == s);
    }
}

TEST_CASE("digit atomicity holds on digit-heavy fuzz input") {
    const auto vocab = tok::train_vocabulary(
        {synthetic_corpus(200, 5) + " 123 4567 890123 a1b2c3 99.9 2026-08-10 "}, 600);
    Rng rng(43);
    auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
    for (int i = 0; i < 500; ++i) {
        std::string s;
        const size_t len = rng.below(120);
        for (size_t j = 0; j < len; ++j) {
            const auto r = rng.below(10);
            if (r < 5) s += char('0' + rng.below(10));
            else if (r < 8) s += char('a' + rng.below(26));
            else s += ' ';
        }
        for (int id : tok::encode(vocab, s).ids) {
            const std::string& bytes = vocab.id_to_bytes[size_t(id)];
            const bool has_digit = std::any_of(bytes.begin(), bytes.end(), is_digit);
            if (has_digit) REQUIRE(bytes.size() == 1); // a digit token is one digit
        }
    }
}

TEST_CASE("training on 'aaaa' learns exactly the (a,a) merge") {
    const auto v = tok::train_vocabulary({"aaaa"}, 257);
    CHECK(v.base_vocab_size() == 257);
    REQUIRE(v.merges.count("aa") == 1);
    CHECK(v.merges.at("aa") == 256);
    CHECK(tok::encode(v, "aaaa").ids == std::vector<int>{256, 256});
}

TEST_CASE("training edge cases") {
    CHECK(tok::train_vocabulary({"abc"}, 256).base_vocab_size() == 256);
    CHECK_THROWS_AS(tok::train_vocabulary({"abc"}, 255), DomainError);
    // No pair repeats anywhere: training stops before the target.
    CHECK(tok::train_vocabulary({"ab"}, 400).base_vocab_size() == 256);
}

TEST_CASE("document order does not change the learned merges") {
    const std::string a = synthetic_corpus(100, 11);
    const std::string b = synthetic_corpus(100, 12);
    const auto v1 = tok::train_vocabulary({a, b}, 400);
    const auto v2 = tok::train_vocabulary({b, a}, 400);
    REQUIRE(v1.id_to_bytes == v2.id_to_bytes);
}

TEST_CASE("trained vocabulary saves and reloads identically") {
    const auto corpus = synthetic_corpus(2000, 21);
    const auto v = tok::train_vocabulary({corpus}, 1256, {"<|endoftext|>"});
    CHECK(v.base_vocab_size() == 1256); // corpus supports the full 1000 merges
    const auto path = std::filesystem::temp_directory_path() / "desklm_vocab_roundtrip.txt";
    tok::save_vocabulary(v, path.string());
    const auto v2 = tok::load_vocabulary(path.string(), {"<|endoftext|>"});
    REQUIRE(v2.id_to_bytes == v.id_to_bytes);
    REQUIRE(v2.specials == v.specials);
    std::filesystem::remove(path);
}

TEST_CASE("adding merges never increases the token count") {
    const auto corpus = synthetic_corpus(400, 31);
    const auto small = tok::train_vocabulary({corpus}, 300);
    const auto large = tok::train_vocabulary({corpus}, 500);
    const std::string probe = synthetic_corpus(50, 32);
    const size_t count_small = tok::encode(small, probe).ids.size();
    const size_t count_large = tok::encode(large, probe).ids.size();
    CHECK(count_large <= count_small);
    CHECK(count_small <= tok::encode(tok::byte_vocabulary(), probe).ids.size());
}

TEST_CASE("compression rate") {
    const auto bytes = tok::byte_vocabulary();
    SUBCASE("self comparison is exactly 1") {
        CHECK(tok::compression_rate(bytes, {"hello world"}, bytes) == 1.0);
    }
    SUBCASE("the aa merge halves a run of a's") {
        auto v = tok::byte_vocabulary();
        v.merges.emplace("aa", 256);
        v.id_to_bytes.push_back("aa");
        const std::string corpus(1000, 'a');
        CHECK(tok::compression_rate(v, {corpus}, bytes) == 2.0);
    }
    SUBCASE("empty corpus is a domain error") {
        CHECK_THROWS_AS(tok::compression_rate(bytes, {}, bytes), DomainError);
        CHECK_THROWS_AS(tok::compression_rate(bytes, {""}, bytes), DomainError);
    }
}
