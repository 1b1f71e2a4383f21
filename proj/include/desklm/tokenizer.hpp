#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "desklm/errors.hpp"

// Byte-level BPE with digit-splitting pre-tokenization. A Vocabulary is
// immutable once built; encode/decode are pure and safe to call from many
// threads. Rank files are one "<base64-of-token-bytes> <decimal-rank>" pair
// per line.

namespace desklm::tok {

struct Vocabulary {
    // Byte sequence of every non-special token -> its rank (== token id).
    std::unordered_map<std::string, int> merges;
    // Dense inverse table, index == rank.
    std::vector<std::string> id_to_bytes;
    // Special-token text -> id; ids start at base_vocab_size in list order.
    std::unordered_map<std::string, int> specials;
    std::vector<std::string> special_list; // in id order

    size_t base_vocab_size() const { return id_to_bytes.size(); }
    size_t total_size() const { return id_to_bytes.size() + special_list.size(); }

    bool is_special(int id) const {
        return id >= int(base_vocab_size()) && id < int(total_size());
    }
    const std::string& special_text(int id) const {
        return special_list[size_t(id) - base_vocab_size()];
    }
    int special_id(std::string_view text) const;
};

struct TokenStream {
    std::vector<int> ids;
    size_t byte_len = 0;
};

// The fixed chunking rule (digits always split to singletons, words and
// punctuation runs take one leading space, other whitespace groups):
//   [0-9]                                   one digit per chunk
// | [ ]?(?:[A-Za-z]|[\x80-\xff])+           word, optional leading space
// | [ ]?[^ \t\n\r\f\v A-Za-z0-9\x80-\xff]+  punctuation run, optional space
// | \s+(?=[^\s0-9])                         whitespace, last space handed on
// | \s+
// Chunks concatenate back to the input byte-for-byte.
std::vector<std::string> pretokenize(std::string_view text);

// Byte-complete vocabulary: the 256 single bytes at ranks 0..255.
Vocabulary byte_vocabulary(const std::vector<std::string>& special_tokens = {});

Vocabulary load_vocabulary(const std::string& path,
                           const std::vector<std::string>& special_tokens);
Vocabulary vocabulary_from_rank_lines(std::string_view text,
                                      const std::vector<std::string>& special_tokens);
void save_vocabulary(const Vocabulary& v, const std::string& path);
std::string vocabulary_to_rank_lines(const Vocabulary& v);

// Lowest-rank-first merge loop per pretokenized chunk. With allow_specials,
// exact special-token substrings become single ids and are never split;
// otherwise they are encoded as ordinary bytes.
TokenStream encode(const Vocabulary& v, std::string_view text, bool allow_specials = false);

std::string decode(const Vocabulary& v, const std::vector<int>& ids);

// Greedy most-frequent-pair merging over the pretokenized corpus until
// target_size non-special tokens exist or no pair repeats. Ties break on
// lexicographic byte order of the pair, so the result is independent of
// document order.
Vocabulary train_vocabulary(const std::vector<std::string>& corpus, size_t target_size,
                            const std::vector<std::string>& special_tokens = {});

// (tokens under baseline) / (tokens under v); > 1 means v compresses better.
double compression_rate(const Vocabulary& v, const std::vector<std::string>& corpus,
                        const Vocabulary& baseline);

} // namespace desklm::tok
