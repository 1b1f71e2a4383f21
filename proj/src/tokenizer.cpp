#include "desklm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "desklm/base64.hpp"

namespace desklm::tok {

namespace {

inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
inline bool is_word(unsigned char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c >= 0x80;
}
inline bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
inline bool is_punct(unsigned char c) { return !is_digit(c) && !is_word(c) && !is_space(c); }

} // namespace

int Vocabulary::special_id(std::string_view text) const {
    auto it = specials.find(std::string(text));
    if (it == specials.end())
        throw DomainError("vocabulary: unregistered special token '" + std::string(text) + "'");
    return it->second;
}

std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<std::string> out;
    const size_t n = text.size();
    size_t i = 0;
    while (i < n) {
        const unsigned char c = uint8_t(text[i]);
        if (is_digit(c)) {
            out.emplace_back(1, text[i]);
            ++i;
            continue;
        }
        if (c == ' ' && i + 1 < n &&
            (is_word(uint8_t(text[i + 1])) || is_punct(uint8_t(text[i + 1])))) {
            const bool word = is_word(uint8_t(text[i + 1]));
            size_t k = i + 1;
            while (k < n && (word ? is_word(uint8_t(text[k])) : is_punct(uint8_t(text[k])))) ++k;
            out.emplace_back(text.substr(i, k - i));
            i = k;
            continue;
        }
        if (is_space(c)) {
            size_t k = i;
            while (k < n && is_space(uint8_t(text[k]))) ++k;
            // Hand the run's final space to a following word/punct chunk.
            if (k < n && text[k - 1] == ' ' && k - 1 > i &&
                (is_word(uint8_t(text[k])) || is_punct(uint8_t(text[k]))))
                --k;
            out.emplace_back(text.substr(i, k - i));
            i = k;
            continue;
        }
        const bool word = is_word(c);
        size_t k = i;
        while (k < n && (word ? is_word(uint8_t(text[k])) : is_punct(uint8_t(text[k])))) ++k;
        out.emplace_back(text.substr(i, k - i));
        i = k;
    }
    return out;
}

namespace {

void validate_and_index(Vocabulary& v) {
    const size_t n = v.merges.size();
    v.id_to_bytes.assign(n, {});
    std::vector<bool> seen(n, false);
    for (const auto& [bytes, rank] : v.merges) {
        if (rank < 0 || size_t(rank) >= n)
            throw IntegrityError("vocabulary: rank " + std::to_string(rank) +
                                 " outside dense range [0, " + std::to_string(n) + ")");
        if (seen[size_t(rank)])
            throw IntegrityError("vocabulary: duplicate rank " + std::to_string(rank));
        seen[size_t(rank)] = true;
        v.id_to_bytes[size_t(rank)] = bytes;
    }
    for (int b = 0; b < 256; ++b) {
        if (!v.merges.count(std::string(1, char(b))))
            throw IntegrityError("vocabulary: missing single-byte token " + std::to_string(b));
    }
}

void register_specials(Vocabulary& v, const std::vector<std::string>& special_tokens) {
    for (const auto& s : special_tokens) {
        if (s.empty()) throw DomainError("vocabulary: empty special token");
        if (v.specials.count(s)) continue;
        const int id = int(v.base_vocab_size() + v.special_list.size());
        v.specials.emplace(s, id);
        v.special_list.push_back(s);
    }
}

} // namespace

Vocabulary byte_vocabulary(const std::vector<std::string>& special_tokens) {
    Vocabulary v;
    for (int b = 0; b < 256; ++b) v.merges.emplace(std::string(1, char(b)), b);
    validate_and_index(v);
    register_specials(v, special_tokens);
    return v;
}

Vocabulary vocabulary_from_rank_lines(std::string_view text,
                                      const std::vector<std::string>& special_tokens) {
    Vocabulary v;
    size_t line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t eol = text.find('\n', pos);
        std::string_view line =
            eol == std::string_view::npos ? text.substr(pos) : text.substr(pos, eol - pos);
        pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
        ++line_no;
        if (line.empty()) continue;
        const size_t sp = line.find(' ');
        if (sp == std::string_view::npos || sp == 0 || sp + 1 >= line.size())
            throw ParseError("rank file line " + std::to_string(line_no) +
                             ": expected '<base64> <rank>'");
        const auto bytes = b64::decode(line.substr(0, sp));
        if (!bytes || bytes->empty())
            throw ParseError("rank file line " + std::to_string(line_no) + ": bad base64 token");
        int rank = 0;
        const std::string_view rank_text = line.substr(sp + 1);
        for (char c : rank_text) {
            if (c < '0' || c > '9')
                throw ParseError("rank file line " + std::to_string(line_no) + ": bad rank '" +
                                 std::string(rank_text) + "'");
            if (rank > (std::numeric_limits<int>::max() - (c - '0')) / 10)
                throw ParseError("rank file line " + std::to_string(line_no) + ": rank overflow");
            rank = rank * 10 + (c - '0');
        }
        if (!v.merges.emplace(*bytes, rank).second)
            throw IntegrityError("rank file line " + std::to_string(line_no) +
                                 ": duplicate token bytes");
    }
    validate_and_index(v);
    register_specials(v, special_tokens);
    return v;
}

Vocabulary load_vocabulary(const std::string& path,
                           const std::vector<std::string>& special_tokens) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open vocabulary file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return vocabulary_from_rank_lines(ss.str(), special_tokens);
}

std::string vocabulary_to_rank_lines(const Vocabulary& v) {
    std::string out;
    for (size_t rank = 0; rank < v.id_to_bytes.size(); ++rank) {
        out += b64::encode(v.id_to_bytes[rank]);
        out += ' ';
        out += std::to_string(rank);
        out += '\n';
    }
    return out;
}

void save_vocabulary(const Vocabulary& v, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write vocabulary file " + path);
    f << vocabulary_to_rank_lines(v);
    if (!f) throw IoError("short write to vocabulary file " + path);
}

namespace {

// Lowest-rank-first pair merging over one chunk (leftmost among equals).
void encode_chunk(const Vocabulary& v, std::string_view chunk, std::vector<int>& out) {
    if (chunk.empty()) return;
    if (chunk.size() == 1) {
        out.push_back(v.merges.at(std::string(chunk)));
        return;
    }
    std::vector<size_t> bounds(chunk.size() + 1);
    for (size_t i = 0; i <= chunk.size(); ++i) bounds[i] = i;
    std::string piece;
    while (bounds.size() > 2) {
        int best_rank = std::numeric_limits<int>::max();
        size_t best_i = 0;
        for (size_t i = 0; i + 2 < bounds.size(); ++i) {
            piece.assign(chunk.substr(bounds[i], bounds[i + 2] - bounds[i]));
            auto it = v.merges.find(piece);
            if (it != v.merges.end() && it->second < best_rank) {
                best_rank = it->second;
                best_i = i;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        bounds.erase(bounds.begin() + ptrdiff_t(best_i) + 1);
    }
    for (size_t i = 0; i + 1 < bounds.size(); ++i) {
        piece.assign(chunk.substr(bounds[i], bounds[i + 1] - bounds[i]));
        auto it = v.merges.find(piece);
        if (it == v.merges.end())
            throw IntegrityError("vocabulary cannot represent byte sequence; merge table is "
                                 "missing an intermediate token");
        out.push_back(it->second);
    }
}

void encode_ordinary(const Vocabulary& v, std::string_view text, std::vector<int>& out) {
    for (const auto& chunk : pretokenize(text)) encode_chunk(v, chunk, out);
}

} // namespace

TokenStream encode(const Vocabulary& v, std::string_view text, bool allow_specials) {
    TokenStream ts;
    ts.byte_len = text.size();
    if (!allow_specials || v.special_list.empty()) {
        encode_ordinary(v, text, ts.ids);
        return ts;
    }
    size_t pos = 0;
    while (pos < text.size()) {
        size_t best_at = std::string_view::npos;
        size_t best_len = 0;
        int best_id = -1;
        for (const auto& s : v.special_list) {
            const size_t at = text.find(s, pos);
            if (at == std::string_view::npos) continue;
            if (at < best_at || (at == best_at && s.size() > best_len)) {
                best_at = at;
                best_len = s.size();
                best_id = v.specials.at(s);
            }
        }
        if (best_at == std::string_view::npos) {
            encode_ordinary(v, text.substr(pos), ts.ids);
            break;
        }
        encode_ordinary(v, text.substr(pos, best_at - pos), ts.ids);
        ts.ids.push_back(best_id);
        pos = best_at + best_len;
    }
    return ts;
}

std::string decode(const Vocabulary& v, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id >= 0 && size_t(id) < v.base_vocab_size()) {
            out += v.id_to_bytes[size_t(id)];
        } else if (v.is_special(id)) {
            out += v.special_text(id);
        } else {
            throw DomainError("decode: unknown token id " + std::to_string(id));
        }
    }
    return out;
}

namespace {

using SymbolPair = std::pair<std::string, std::string>;

struct TrainWord {
    std::vector<std::string> pieces;
    int64_t count = 0;
};

} // namespace

Vocabulary train_vocabulary(const std::vector<std::string>& corpus, size_t target_size,
                            const std::vector<std::string>& special_tokens) {
    if (target_size < 256)
        throw DomainError("train_vocabulary: target_size must be at least 256");

    // Chunk frequency table; chunk insertion order does not matter because
    // the merge selection below is order-free.
    std::unordered_map<std::string, int64_t> chunk_counts;
    for (const auto& doc : corpus)
        for (auto& chunk : pretokenize(doc)) chunk_counts[chunk] += 1;

    std::vector<TrainWord> words;
    words.reserve(chunk_counts.size());
    for (auto& [chunk, count] : chunk_counts) {
        TrainWord w;
        w.count = count;
        w.pieces.reserve(chunk.size());
        for (char c : chunk) w.pieces.emplace_back(1, c);
        words.push_back(std::move(w));
    }

    std::map<SymbolPair, int64_t> pair_counts;
    std::map<SymbolPair, std::set<size_t>> pair_words;
    auto add_word_pairs = [&](size_t wi, int64_t sign) {
        const auto& p = words[wi].pieces;
        for (size_t i = 0; i + 1 < p.size(); ++i) {
            SymbolPair key{p[i], p[i + 1]};
            auto& cnt = pair_counts[key];
            cnt += sign * words[wi].count;
            if (sign > 0) {
                pair_words[key].insert(wi);
            } else if (cnt <= 0) {
                pair_counts.erase(key);
                pair_words.erase(key);
            }
        }
    };
    for (size_t wi = 0; wi < words.size(); ++wi) add_word_pairs(wi, +1);

    Vocabulary v;
    for (int b = 0; b < 256; ++b) v.merges.emplace(std::string(1, char(b)), b);
    int next_rank = 256;

    while (size_t(next_rank) < target_size) {
        // Highest count wins; ties break on lexicographic pair order.
        const SymbolPair* best = nullptr;
        int64_t best_count = 1; // require a repeating pair
        for (const auto& [pair, count] : pair_counts) {
            if (count > best_count) {
                best_count = count;
                best = &pair;
            }
            // std::map iterates pairs in ascending order, so the first
            // maximum seen is already the lexicographically smallest.
        }
        if (!best) break;
        const SymbolPair merged_pair = *best;
        const std::string merged = merged_pair.first + merged_pair.second;
        if (!v.merges.emplace(merged, next_rank).second)
            throw IntegrityError("train_vocabulary: duplicate merge product");
        ++next_rank;

        const std::set<size_t> affected = pair_words[merged_pair];
        for (size_t wi : affected) {
            add_word_pairs(wi, -1);
            auto& p = words[wi].pieces;
            std::vector<std::string> merged_pieces;
            merged_pieces.reserve(p.size());
            for (size_t i = 0; i < p.size(); ++i) {
                if (i + 1 < p.size() && p[i] == merged_pair.first &&
                    p[i + 1] == merged_pair.second) {
                    merged_pieces.push_back(merged);
                    ++i;
                } else {
                    merged_pieces.push_back(p[i]);
                }
            }
            p = std::move(merged_pieces);
            add_word_pairs(wi, +1);
        }
    }

    validate_and_index(v);
    register_specials(v, special_tokens);
    return v;
}

double compression_rate(const Vocabulary& v, const std::vector<std::string>& corpus,
                        const Vocabulary& baseline) {
    size_t bytes = 0;
    size_t tokens_v = 0, tokens_base = 0;
    for (const auto& doc : corpus) {
        bytes += doc.size();
        tokens_v += encode(v, doc).ids.size();
        tokens_base += encode(baseline, doc).ids.size();
    }
    if (bytes == 0) throw DomainError("compression_rate: empty corpus");
    return double(tokens_base) / double(tokens_v);
}

} // namespace desklm::tok
