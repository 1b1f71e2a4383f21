#pragma once

#include <cstddef>
#include <string>

#include "desklm/errors.hpp"

namespace desklm::core {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "fp32" : "fp64"; }
inline Precision precision_from_string(const std::string& s) {
    if (s == "fp32") return Precision::f32;
    if (s == "fp64") return Precision::f64;
    throw ParseError("unknown precision '" + s + "' (expected fp32 or fp64)");
}

// ceil(8/3 * hidden) rounded up to a multiple of 8.
inline size_t default_ffn_hidden(size_t hidden) {
    const size_t raw = (8 * hidden + 2) / 3;
    return (raw + 7) / 8 * 8;
}

struct ModelConfig {
    size_t vocab_size = 0;
    size_t hidden = 0;
    size_t n_heads = 0;
    size_t n_layers = 0;
    size_t ffn_hidden = 0;      // 0 -> default_ffn_hidden(hidden)
    double rope_base = 10000.0;
    size_t train_context = 0;
    bool tie_embeddings = false;
    Precision precision = Precision::f32;

    size_t head_dim() const { return hidden / n_heads; }

    void finalize() {
        if (ffn_hidden == 0) ffn_hidden = default_ffn_hidden(hidden);
    }

    void validate() const {
        if (vocab_size == 0) throw DomainError("model: vocab_size must be positive");
        if (hidden == 0 || n_heads == 0 || n_layers == 0)
            throw DomainError("model: hidden, n_heads, n_layers must be positive");
        if (hidden % n_heads != 0)
            throw DomainError("model: hidden must be divisible by n_heads");
        if (head_dim() % 2 != 0)
            throw DomainError("model: head_dim must be even (RoPE pairs dimensions)");
        if (ffn_hidden == 0) throw DomainError("model: ffn_hidden must be positive");
        if (rope_base <= 0.0) throw DomainError("model: rope_base must be positive");
        if (train_context < 1) throw DomainError("model: train_context must be >= 1");
    }
};

} // namespace desklm::core
