#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "desklm/errors.hpp"
#include "desklm/kernels.hpp"
#include "desklm/model_config.hpp"
#include "desklm/rope.hpp"
#include "desklm/tensor.hpp"

// Training-free long-context techniques: NTK-aware base adjustment (static
// and chunk-quantized dynamic), LogN query scaling, and layer-wise window
// masks. All pure functions; the model consumes them through an
// InferencePlan built by configure_inference.

namespace desklm::ext {

struct NtkOff {};
struct NtkStatic {
    double scale = 1.0;
};
struct NtkDynamic {
    size_t chunk = 0; // 0 -> use train_context
};
using NtkMode = std::variant<NtkOff, NtkStatic, NtkDynamic>;

// Per-layer window sizes, either given explicitly or generated from
// (w_min, w_max) by geometric interpolation, lower layers shorter.
struct WindowAuto {
    size_t w_min = 0; // 0 -> train_context / 2
    size_t w_max = 0; // 0 -> 4 * train_context
};
using WindowSchedule = std::variant<std::monostate, std::vector<size_t>, WindowAuto>;

struct ExtensionConfig {
    NtkMode ntk_mode = NtkOff{};
    bool logn = false;
    WindowSchedule window_schedule = std::monostate{};
    size_t train_context = 0; // copied from ModelConfig when wired up

    bool all_off() const {
        return std::holds_alternative<NtkOff>(ntk_mode) && !logn &&
               std::holds_alternative<std::monostate>(window_schedule);
    }

    void validate(size_t n_layers) const {
        if (auto* st = std::get_if<NtkStatic>(&ntk_mode)) {
            if (st->scale < 1.0) throw DomainError("extension: NTK scale must be >= 1");
        }
        if (auto* w = std::get_if<std::vector<size_t>>(&window_schedule)) {
            if (w->size() != n_layers)
                throw DomainError("extension: window schedule length must equal n_layers");
            size_t prev = 1;
            for (size_t ws : *w) {
                if (ws < 1) throw DomainError("extension: window sizes must be >= 1");
                if (ws < prev)
                    throw DomainError("extension: window sizes must be non-decreasing from layer 0");
                prev = ws;
            }
        }
        if (auto* a = std::get_if<WindowAuto>(&window_schedule)) {
            if (a->w_min != 0 && a->w_max != 0 && a->w_min > a->w_max)
                throw DomainError("extension: w_min must not exceed w_max");
        }
    }
};

// base * s^(head_dim / (head_dim - 2)); enlarges the RoPE base so low
// frequencies stretch over the extended context while the highest
// frequency is almost preserved.
inline double ntk_adjusted_base(double base, double s, size_t head_dim) {
    if (head_dim <= 2) throw DomainError("ntk_adjusted_base: head_dim must exceed 2");
    if (s < 1.0) throw DomainError("ntk_adjusted_base: scale must be >= 1");
    return base * std::pow(s, double(head_dim) / double(head_dim - 2));
}

// Chunk-quantized length ratio: s = max(1, ceil_to_chunk(m)/L). A step
// function of m, constant within each chunk, non-decreasing.
inline double dynamic_scale(size_t current_len, size_t train_context, size_t chunk) {
    if (current_len < 1 || train_context < 1 || chunk < 1)
        throw DomainError("dynamic_scale: lengths must be >= 1");
    const size_t quantized = (current_len + chunk - 1) / chunk * chunk;
    return std::max(1.0, double(quantized) / double(train_context));
}

// lambda = max(1, log m / log N), the attention logit multiplier.
inline double logn_scale(size_t current_len, size_t train_context) {
    if (train_context <= 1) throw DomainError("logn_scale: train_context must be >= 2");
    if (current_len < 1) throw DomainError("logn_scale: current length must be >= 1");
    return std::max(1.0, std::log(double(current_len)) / std::log(double(train_context)));
}

// Geometric interpolation from w_min (layer 0) to w_max (top layer),
// rounded to multiples of 64.
inline std::vector<size_t> generate_window_schedule(size_t w_min, size_t w_max, size_t n_layers) {
    if (w_min < 1 || w_max < w_min) throw DomainError("window schedule: need 1 <= w_min <= w_max");
    std::vector<size_t> out(n_layers);
    for (size_t l = 0; l < n_layers; ++l) {
        const double t = n_layers > 1 ? double(l) / double(n_layers - 1) : 1.0;
        const double w = double(w_min) * std::pow(double(w_max) / double(w_min), t);
        const size_t rounded = std::max<size_t>(64, size_t(std::llround(w / 64.0)) * 64);
        out[l] = rounded;
    }
    return out;
}

// Resolved per-layer windows; nullopt = plain causal.
inline std::vector<std::optional<size_t>> resolve_windows(const ExtensionConfig& ext,
                                                          size_t n_layers) {
    std::vector<std::optional<size_t>> out(n_layers, std::nullopt);
    if (auto* expl = std::get_if<std::vector<size_t>>(&ext.window_schedule)) {
        for (size_t l = 0; l < n_layers; ++l) out[l] = (*expl)[l];
    } else if (auto* a = std::get_if<WindowAuto>(&ext.window_schedule)) {
        const size_t w_min = a->w_min ? a->w_min : std::max<size_t>(1, ext.train_context / 2);
        const size_t w_max = a->w_max ? a->w_max : 4 * ext.train_context;
        auto sched = generate_window_schedule(w_min, w_max, n_layers);
        for (size_t l = 0; l < n_layers; ++l) out[l] = sched[l];
    }
    return out;
}

// Additive mask block for queries at absolute positions
// [q_start, q_start + q_len) against keys at [0, kv_len). Entry (i, j) is 0
// when key j is visible from query q_start+i, kMaskValue otherwise. A query
// sees keys in [max(0, pos - w + 1), pos]; without a window that is [0, pos].
template <typename T>
Tensor<T> attention_mask(size_t q_start, size_t q_len, size_t kv_len,
                         std::optional<size_t> window) {
    Tensor<T> mask(q_len, kv_len);
    for (size_t i = 0; i < q_len; ++i) {
        const size_t pos = q_start + i;
        const size_t hi = std::min(pos, kv_len == 0 ? 0 : kv_len - 1);
        size_t lo = 0;
        if (window && pos + 1 > *window) lo = pos + 1 - *window;
        T* row = mask.row(i);
        for (size_t j = 0; j < kv_len; ++j)
            row[j] = (j >= lo && j <= hi) ? T(0) : T(kern::kMaskValue);
    }
    return mask;
}

// Square causal(-and-windowed) mask for one layer, the shape tests and the
// public attention op consume.
template <typename T>
Tensor<T> window_mask(size_t seq_len, size_t layer_index, const ExtensionConfig& ext,
                      size_t n_layers) {
    if (layer_index >= n_layers) throw DomainError("window_mask: layer_index out of range");
    const auto windows = resolve_windows(ext, n_layers);
    return attention_mask<T>(0, seq_len, seq_len, windows[layer_index]);
}

template <typename T>
Tensor<T> causal_mask(size_t seq_len) {
    return attention_mask<T>(0, seq_len, seq_len, std::nullopt);
}

// Everything the decoder needs to run one forward call at total context
// length m under a given technique set.
struct InferencePlan {
    core::RopeTable rope;
    double ntk_scale = 1.0;   // the s the table was built with
    double logit_scale = 1.0; // LogN lambda, 1 when disabled or clamped
    std::vector<std::optional<size_t>> windows;
};

inline double ntk_scale_for_length(const ExtensionConfig& ext, size_t m) {
    if (std::holds_alternative<NtkOff>(ext.ntk_mode)) return 1.0;
    if (auto* st = std::get_if<NtkStatic>(&ext.ntk_mode)) return st->scale;
    const auto& dyn = std::get<NtkDynamic>(ext.ntk_mode);
    const size_t chunk = dyn.chunk ? dyn.chunk : ext.train_context;
    return dynamic_scale(m, ext.train_context, chunk);
}

inline InferencePlan configure_inference(const core::ModelConfig& cfg,
                                         const ExtensionConfig& ext, size_t m) {
    ExtensionConfig e = ext;
    if (e.train_context == 0) e.train_context = cfg.train_context;
    e.validate(cfg.n_layers);
    InferencePlan plan;
    plan.ntk_scale = ntk_scale_for_length(e, m);
    const double base = plan.ntk_scale == 1.0
                            ? cfg.rope_base
                            : ntk_adjusted_base(cfg.rope_base, plan.ntk_scale, cfg.head_dim());
    plan.rope = core::build_rope_table(cfg.head_dim(), base);
    plan.logit_scale = e.logn ? logn_scale(m, e.train_context) : 1.0;
    plan.windows = resolve_windows(e, cfg.n_layers);
    return plan;
}

} // namespace desklm::ext
