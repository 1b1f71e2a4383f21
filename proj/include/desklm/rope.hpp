#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "desklm/errors.hpp"

namespace desklm::core {

// Inverse-frequency table for rotary embeddings. Kept in 64-bit regardless
// of the model's compute precision; consumers cast at the application site.
struct RopeTable {
    std::vector<double> inv_freq; // inv_freq[i] = base^(-2i/head_dim), strictly decreasing
    double base_used = 0.0;

    bool operator==(const RopeTable&) const = default;
};

inline RopeTable build_rope_table(size_t head_dim, double base) {
    if (head_dim % 2 != 0 || head_dim == 0)
        throw DomainError("rope: head_dim must be even and positive");
    if (base <= 0.0) throw DomainError("rope: base must be positive");
    RopeTable t;
    t.base_used = base;
    t.inv_freq.resize(head_dim / 2);
    for (size_t i = 0; i < head_dim / 2; ++i)
        t.inv_freq[i] = std::pow(base, -2.0 * double(i) / double(head_dim));
    return t;
}

// Rotates each (2i, 2i+1) pair of every head by position * inv_freq[i].
// x is [positions x (n_heads*head_dim)] row-major; row r sits at absolute
// position start_pos + r. sign = -1 undoes a rotation (used by backprop).
template <typename T>
void apply_rope(T* x, size_t positions, size_t n_heads, size_t head_dim,
                size_t start_pos, const RopeTable& table, int sign = +1) {
    const size_t half = head_dim / 2;
    const size_t stride = n_heads * head_dim;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 1)
#endif
    for (size_t r = 0; r < positions; ++r) {
        const double pos = double(start_pos + r);
        T* row = x + r * stride;
        for (size_t i = 0; i < half; ++i) {
            const double angle = pos * table.inv_freq[i];
            const double c = std::cos(angle);
            const double s = sign < 0 ? -std::sin(angle) : std::sin(angle);
            for (size_t h = 0; h < n_heads; ++h) {
                T* pair = row + h * head_dim + 2 * i;
                const double x0 = double(pair[0]);
                const double x1 = double(pair[1]);
                pair[0] = T(x0 * c - x1 * s);
                pair[1] = T(x0 * s + x1 * c);
            }
        }
    }
}

} // namespace desklm::core
