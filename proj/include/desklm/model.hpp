#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "desklm/errors.hpp"
#include "desklm/extension.hpp"
#include "desklm/kernels.hpp"
#include "desklm/model_config.hpp"
#include "desklm/rng.hpp"
#include "desklm/rope.hpp"
#include "desklm/tensor.hpp"

// Decoder stack: untied embeddings, pre-norm RMSNorm, attention with biases
// on Q/K/V only, RoPE from a 64-bit inverse-frequency table, SwiGLU FFN,
// KV-cached incremental decoding. Templated on the compute type; fp32 is
// the working precision, fp64 backs gradient checks and equivalence tests.

namespace desklm::core {

inline constexpr size_t kMaxContext = 1u << 20;

template <typename T>
struct LayerWeights {
    Tensor<T> attn_norm_gain; // [hidden]
    Tensor<T> wq, wk, wv;     // [hidden x hidden]
    Tensor<T> bq, bk, bv;     // [hidden]; the only biases in the model
    Tensor<T> wo;             // [hidden x hidden]
    Tensor<T> ffn_norm_gain;  // [hidden]
    Tensor<T> w_gate, w_up;   // [hidden x ffn_hidden]
    Tensor<T> w_down;         // [ffn_hidden x hidden]
};

template <typename T>
struct Weights {
    Tensor<T> input_embedding;   // [vocab x hidden]
    Tensor<T> output_projection; // [hidden x vocab]; empty when tied
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm_gain; // [hidden]
};

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* tensor;
    bool decay; // weight decay applies; false for norm gains and biases
};

template <typename T>
std::vector<ParamRef<T>> parameters(Weights<T>& w, const ModelConfig& cfg) {
    std::vector<ParamRef<T>> out;
    out.push_back({"input_embedding", &w.input_embedding, true});
    if (!cfg.tie_embeddings) out.push_back({"output_projection", &w.output_projection, true});
    for (size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "attn_norm.gain", &lw.attn_norm_gain, false});
        out.push_back({p + "wq", &lw.wq, true});
        out.push_back({p + "bq", &lw.bq, false});
        out.push_back({p + "wk", &lw.wk, true});
        out.push_back({p + "bk", &lw.bk, false});
        out.push_back({p + "wv", &lw.wv, true});
        out.push_back({p + "bv", &lw.bv, false});
        out.push_back({p + "wo", &lw.wo, true});
        out.push_back({p + "ffn_norm.gain", &lw.ffn_norm_gain, false});
        out.push_back({p + "w_gate", &lw.w_gate, true});
        out.push_back({p + "w_up", &lw.w_up, true});
        out.push_back({p + "w_down", &lw.w_down, true});
    }
    out.push_back({"final_norm.gain", &w.final_norm_gain, false});
    return out;
}

template <typename T>
Weights<T> make_weights(const ModelConfig& cfg) {
    const size_t H = cfg.hidden, F = cfg.ffn_hidden, V = cfg.vocab_size;
    Weights<T> w;
    w.input_embedding = Tensor<T>(V, H);
    if (!cfg.tie_embeddings) w.output_projection = Tensor<T>(H, V);
    w.final_norm_gain = Tensor<T>(std::vector<size_t>{H});
    w.layers.resize(cfg.n_layers);
    for (auto& lw : w.layers) {
        lw.attn_norm_gain = Tensor<T>(std::vector<size_t>{H});
        lw.wq = Tensor<T>(H, H);
        lw.wk = Tensor<T>(H, H);
        lw.wv = Tensor<T>(H, H);
        lw.bq = Tensor<T>(std::vector<size_t>{H});
        lw.bk = Tensor<T>(std::vector<size_t>{H});
        lw.bv = Tensor<T>(std::vector<size_t>{H});
        lw.wo = Tensor<T>(H, H);
        lw.ffn_norm_gain = Tensor<T>(std::vector<size_t>{H});
        lw.w_gate = Tensor<T>(H, F);
        lw.w_up = Tensor<T>(H, F);
        lw.w_down = Tensor<T>(F, H);
    }
    return w;
}

template <typename T>
Weights<T> init_weights(const ModelConfig& cfg, uint64_t seed) {
    Weights<T> w = make_weights<T>(cfg);
    Rng rng(sub_seed(seed, 0x1717));
    const double std_base = 0.02;
    // Residual-branch outputs get the depth-scaled init.
    const double std_resid = std_base / std::sqrt(2.0 * double(cfg.n_layers));
    auto fill = [&](Tensor<T>& t, double sd) {
        for (auto& v : t.data) v = T(rng.normal() * sd);
    };
    fill(w.input_embedding, std_base);
    if (!cfg.tie_embeddings) fill(w.output_projection, std_base);
    for (auto& lw : w.layers) {
        fill(lw.wq, std_base);
        fill(lw.wk, std_base);
        fill(lw.wv, std_base);
        fill(lw.wo, std_resid);
        fill(lw.w_gate, std_base);
        fill(lw.w_up, std_base);
        fill(lw.w_down, std_resid);
        std::fill(lw.attn_norm_gain.data.begin(), lw.attn_norm_gain.data.end(), T(1));
        std::fill(lw.ffn_norm_gain.data.begin(), lw.ffn_norm_gain.data.end(), T(1));
    }
    std::fill(w.final_norm_gain.data.begin(), w.final_norm_gain.data.end(), T(1));
    return w;
}

// ---------------------------------------------------------------------------
// Spec-level single-call ops (also the building blocks of the stack).

inline constexpr double kRmsEps = 1e-6;

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(kRmsEps)) {
    if (eps <= T(0)) throw DomainError("rmsnorm: eps must be positive");
    if (x.cols() != gain.element_count() && x.element_count() != gain.element_count())
        throw DomainError("rmsnorm: gain length mismatch");
    Tensor<T> y(x.shape);
    const size_t cols = x.rank() == 1 ? x.element_count() : x.cols();
    const size_t rows = x.element_count() / cols;
    kern::rmsnorm(x.data.data(), gain.data.data(), y.data.data(), rows, cols, eps);
    return y;
}

inline double swish(double z) { return z / (1.0 + std::exp(-z)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// W_down * (swish(W_gate x) ⊙ (W_up x)) for a single activation vector.
template <typename T>
Tensor<T> swiglu_ffn(const Tensor<T>& x, const Tensor<T>& w_gate, const Tensor<T>& w_up,
                     const Tensor<T>& w_down) {
    const size_t H = x.element_count(), F = w_gate.cols();
    if (w_gate.rows() != H || w_up.rows() != H || w_up.cols() != F || w_down.rows() != F ||
        w_down.cols() != H)
        throw DomainError("swiglu_ffn: inconsistent shapes");
    Tensor<T> gate(std::vector<size_t>{F}), up(std::vector<size_t>{F});
    kern::matmul_nn(x.data.data(), H, w_gate.data.data(), F, gate.data.data(), F, 1, H, F);
    kern::matmul_nn(x.data.data(), H, w_up.data.data(), F, up.data.data(), F, 1, H, F);
    for (size_t i = 0; i < F; ++i) gate[i] = T(swish(double(gate[i]))) * up[i];
    Tensor<T> y(std::vector<size_t>{H});
    kern::matmul_nn(gate.data.data(), H, w_down.data.data(), H, y.data.data(), H, 1, F, H);
    return y;
}

inline RopeTable build_rope_table(const ModelConfig& cfg,
                                  std::optional<double> base_override = std::nullopt) {
    return build_rope_table(cfg.head_dim(), base_override.value_or(cfg.rope_base));
}

// Single-head scaled-dot-product attention with an additive mask;
// softmax(scale * q k^T / sqrt(d) + mask) v. Fully masked rows yield zeros.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& mask, double logit_scale = 1.0) {
    const size_t tq = q.rows(), tk = k.rows(), d = q.cols();
    if (k.cols() != d || v.rows() != tk || mask.rows() != tq || mask.cols() != tk)
        throw DomainError("attention: inconsistent shapes");
    if (logit_scale <= 0.0) throw DomainError("attention: logit_scale must be positive");
    Tensor<T> scores(tq, tk);
    kern::matmul_nt(q.data.data(), d, k.data.data(), d, scores.data.data(), tk, tq, d, tk);
    const T c = T(logit_scale / std::sqrt(double(d)));
    for (size_t i = 0; i < tq * tk; ++i) scores.data[i] = scores.data[i] * c + mask.data[i];
    kern::softmax_rows(scores.data.data(), tq, tk);
    Tensor<T> out(tq, v.cols());
    kern::matmul_nn(scores.data.data(), tk, v.data.data(), v.cols(), out.data.data(), v.cols(),
                    tq, tk, v.cols());
    return out;
}

// ---------------------------------------------------------------------------
// KV cache. Keys are stored post-RoPE, so a dynamic-NTK scale change makes
// the cached rotations stale; forward() detects that and re-encodes the
// recorded prefix ids with the new table.

template <typename T>
struct KVCache {
    size_t n_layers = 0;
    size_t width = 0; // n_heads * head_dim
    std::vector<std::vector<T>> k, v;
    std::vector<int> ids;
    size_t current_len = 0;
    double rope_scale = 1.0;

    KVCache() = default;
    KVCache(size_t layers, size_t w) : n_layers(layers), width(w), k(layers), v(layers) {}

    void reset() {
        for (auto& kk : k) kk.clear();
        for (auto& vv : v) vv.clear();
        ids.clear();
        current_len = 0;
        rope_scale = 1.0;
    }
};

template <typename T>
KVCache<T> make_cache(const ModelConfig& cfg) {
    return KVCache<T>(cfg.n_layers, cfg.hidden);
}

// ---------------------------------------------------------------------------
// Saved activations for one sequence, consumed by the backward pass.

template <typename T>
struct LayerTrace {
    Tensor<T> x_in;                  // residual entering the attention block
    Tensor<T> normed_attn;           // rmsnorm(x_in)
    Tensor<T> q_rot, k_rot, v;       // post-RoPE q/k, plain v   [seq x hidden]
    std::vector<Tensor<T>> probs;    // per head [seq x seq] softmax output
    Tensor<T> ctx;                   // concatenated head outputs
    Tensor<T> attn_drop_mask;        // empty unless dropout active
    Tensor<T> x_mid;                 // residual entering the FFN block
    Tensor<T> normed_ffn;            // rmsnorm(x_mid)
    Tensor<T> gate_pre, up;          // pre-activation gate, up projection
    Tensor<T> ffn_drop_mask;
};

template <typename T>
struct ForwardTrace {
    std::vector<int> ids;
    std::vector<LayerTrace<T>> layers;
    Tensor<T> x_final;      // residual after the last layer
    Tensor<T> normed_final; // rmsnorm(x_final)
    ext::InferencePlan plan;
    // Dropout inputs; rng must be non-null when rate > 0.
    double dropout = 0.0;
    Rng* rng = nullptr;
};

// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void dropout_inplace(Tensor<T>& x, Tensor<T>& mask_out, double rate, Rng& rng) {
    mask_out = Tensor<T>(x.shape);
    const T keep_scale = T(1.0 / (1.0 - rate));
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T m = rng.uniform() < rate ? T(0) : keep_scale;
        mask_out.data[i] = m;
        x.data[i] *= m;
    }
}

// Runs the stack over `ids` with `past` tokens already in the cache.
// Returns logits for rows [logit_start, ids.size()).
template <typename T>
Tensor<T> run_stack(const ModelConfig& cfg, const Weights<T>& w, std::span<const int> ids,
                    const ext::InferencePlan& plan, KVCache<T>* cache, ForwardTrace<T>* trace,
                    size_t logit_start) {
    const size_t H = cfg.hidden, F = cfg.ffn_hidden, V = cfg.vocab_size;
    const size_t n_heads = cfg.n_heads, hd = cfg.head_dim();
    const size_t seq = ids.size();
    const size_t past = cache ? cache->current_len : 0;
    const size_t kv_len = past + seq;
    const T scale = T(plan.logit_scale / std::sqrt(double(hd)));

    Tensor<T> x(seq, H);
    for (size_t t = 0; t < seq; ++t) {
        const T* src = w.input_embedding.row(size_t(ids[t]));
        std::copy(src, src + H, x.row(t));
    }

    if (trace) {
        trace->ids.assign(ids.begin(), ids.end());
        trace->layers.resize(cfg.n_layers);
        trace->plan = plan;
    }

    Tensor<T> normed(seq, H), q(seq, H), k(seq, H), v(seq, H), ctx(seq, H), proj(seq, H);
    Tensor<T> gate(seq, F), up(seq, F);
    Tensor<T> scores;

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[l];
        LayerTrace<T>* lt = trace ? &trace->layers[l] : nullptr;
        if (lt) lt->x_in = x;

        kern::rmsnorm(x.data.data(), lw.attn_norm_gain.data.data(), normed.data.data(), seq, H,
                      T(kRmsEps));
        if (lt) lt->normed_attn = normed;

        kern::matmul_nn(normed.data.data(), H, lw.wq.data.data(), H, q.data.data(), H, seq, H, H);
        kern::add_bias(q.data.data(), lw.bq.data.data(), seq, H);
        kern::matmul_nn(normed.data.data(), H, lw.wk.data.data(), H, k.data.data(), H, seq, H, H);
        kern::add_bias(k.data.data(), lw.bk.data.data(), seq, H);
        kern::matmul_nn(normed.data.data(), H, lw.wv.data.data(), H, v.data.data(), H, seq, H, H);
        kern::add_bias(v.data.data(), lw.bv.data.data(), seq, H);

        apply_rope(q.data.data(), seq, n_heads, hd, past, plan.rope);
        apply_rope(k.data.data(), seq, n_heads, hd, past, plan.rope);

        if (lt) {
            lt->q_rot = q;
            lt->k_rot = k;
            lt->v = v;
            lt->probs.resize(n_heads);
        }

        const T* k_all = k.data.data();
        const T* v_all = v.data.data();
        if (cache) {
            auto& ck = cache->k[l];
            auto& cv = cache->v[l];
            ck.insert(ck.end(), k.data.begin(), k.data.end());
            cv.insert(cv.end(), v.data.begin(), v.data.end());
            k_all = ck.data();
            v_all = cv.data();
        }

        const auto mask = ext::attention_mask<T>(past, seq, kv_len, plan.windows[l]);
        scores = Tensor<T>(seq, kv_len);
        for (size_t h = 0; h < n_heads; ++h) {
            const size_t off = h * hd;
            kern::matmul_nt(q.data.data() + off, H, k_all + off, H, scores.data.data(), kv_len,
                            seq, hd, kv_len);
            for (size_t i = 0; i < seq * kv_len; ++i)
                scores.data[i] = scores.data[i] * scale + mask.data[i];
            kern::softmax_rows(scores.data.data(), seq, kv_len);
            if (lt) lt->probs[h] = scores;
            kern::matmul_nn(scores.data.data(), kv_len, v_all + off, H, ctx.data.data() + off, H,
                            seq, kv_len, hd);
        }
        if (lt) lt->ctx = ctx;

        kern::matmul_nn(ctx.data.data(), H, lw.wo.data.data(), H, proj.data.data(), H, seq, H, H);
        if (trace && trace->dropout > 0.0)
            dropout_inplace(proj, lt->attn_drop_mask, trace->dropout, *trace->rng);
        for (size_t i = 0; i < seq * H; ++i) x.data[i] += proj.data[i];

        if (lt) lt->x_mid = x;
        kern::rmsnorm(x.data.data(), lw.ffn_norm_gain.data.data(), normed.data.data(), seq, H,
                      T(kRmsEps));
        if (lt) lt->normed_ffn = normed;

        kern::matmul_nn(normed.data.data(), H, lw.w_gate.data.data(), F, gate.data.data(), F, seq,
                        H, F);
        kern::matmul_nn(normed.data.data(), H, lw.w_up.data.data(), F, up.data.data(), F, seq, H,
                        F);
        if (lt) {
            lt->gate_pre = gate;
            lt->up = up;
        }
        T* gd = gate.data.data();
        const T* ud = up.data.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (seq > 1)
#endif
        for (size_t i = 0; i < seq * F; ++i) gd[i] = T(swish(double(gd[i]))) * ud[i];

        kern::matmul_nn(gate.data.data(), F, lw.w_down.data.data(), H, proj.data.data(), H, seq,
                        F, H);
        if (trace && trace->dropout > 0.0)
            dropout_inplace(proj, lt->ffn_drop_mask, trace->dropout, *trace->rng);
        for (size_t i = 0; i < seq * H; ++i) x.data[i] += proj.data[i];
    }

    if (cache) {
        cache->ids.insert(cache->ids.end(), ids.begin(), ids.end());
        cache->current_len = kv_len;
    }

    const size_t out_rows = seq - logit_start;
    Tensor<T> normed_out(out_rows, H);
    kern::rmsnorm(x.row(logit_start), w.final_norm_gain.data.data(), normed_out.data.data(),
                  out_rows, H, T(kRmsEps));
    if (trace) {
        trace->x_final = x;
        trace->normed_final = normed_out;
    }
    Tensor<T> logits(out_rows, V);
    if (cfg.tie_embeddings) {
        kern::matmul_nt(normed_out.data.data(), H, w.input_embedding.data.data(), H,
                        logits.data.data(), V, out_rows, H, V);
    } else {
        kern::matmul_nn(normed_out.data.data(), H, w.output_projection.data.data(), V,
                        logits.data.data(), V, out_rows, H, V);
    }
    return logits;
}

} // namespace detail

// Decoder forward pass. Returns logits for the supplied positions (all of
// them without a cache, the newly appended ones with a cache). Logits at
// position t depend only on ids[0..t].
template <typename T>
Tensor<T> forward(const ModelConfig& cfg, const Weights<T>& w, std::span<const int> ids,
                  const ext::ExtensionConfig& e = {}, KVCache<T>* cache = nullptr,
                  ForwardTrace<T>* trace = nullptr) {
    if (trace && cache) throw DomainError("forward: tracing is only supported without a cache");
    for (int id : ids)
        if (id < 0 || size_t(id) >= cfg.vocab_size)
            throw DomainError("forward: token id " + std::to_string(id) + " outside vocabulary");
    const size_t past = cache ? cache->current_len : 0;
    const size_t total = past + ids.size();
    if (total > kMaxContext) throw DomainError("forward: context exceeds engine limit");
    if (ids.empty()) throw DomainError("forward: empty token sequence");

    auto plan = ext::configure_inference(cfg, e, total);

    if (cache && past > 0 && plan.ntk_scale != cache->rope_scale) {
        // Scale boundary: cached keys hold stale rotations. Re-encode the
        // whole prefix under the new table and return logits for the new
        // suffix only.
        std::vector<int> full(cache->ids);
        full.insert(full.end(), ids.begin(), ids.end());
        const size_t keep = ids.size();
        cache->reset();
        cache->rope_scale = plan.ntk_scale;
        return detail::run_stack<T>(cfg, w, full, plan, cache, nullptr, full.size() - keep);
    }
    if (cache && past == 0) cache->rope_scale = plan.ntk_scale;
    return detail::run_stack<T>(cfg, w, ids, plan, cache, trace, 0);
}

} // namespace desklm::core
