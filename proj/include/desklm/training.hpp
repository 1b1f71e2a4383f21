#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "desklm/errors.hpp"
#include "desklm/kernels.hpp"
#include "desklm/model.hpp"
#include "desklm/rng.hpp"

// Autoregressive training: document packing, masked cross entropy, full
// backprop through the decoder, AdamW with decoupled decay, warmup + cosine
// schedule decaying to a fraction of the peak rate.

namespace desklm::train {

struct TrainConfig {
    double peak_lr = 3e-4;
    size_t warmup_steps = 0;
    size_t total_steps = 1;
    double min_lr_fraction = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    size_t batch_size = 1;
    size_t context = 0;
    double dropout = 0.0; // SFT option; pretraining leaves it at 0

    void validate() const {
        if (!(min_lr_fraction > 0.0 && min_lr_fraction <= 1.0))
            throw DomainError("train: min_lr_fraction must be in (0, 1]");
        if (warmup_steps > total_steps)
            throw DomainError("train: warmup_steps must not exceed total_steps");
        if (batch_size < 1) throw DomainError("train: batch_size must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0)
            throw DomainError("train: dropout must be in [0, 1)");
    }
};

// Fixed-context training rows. Targets are the inputs shifted left by one;
// a row whose shifted target falls off the end of the token stream gets a
// padding target with mask 0, so the mask is 0 exactly where the target is
// padding and 1 everywhere else.
struct Batch {
    size_t rows = 0;
    size_t context = 0;
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<uint8_t> mask;

    std::span<const int> input_row(size_t r) const { return {inputs.data() + r * context, context}; }
    std::span<const int> target_row(size_t r) const {
        return {targets.data() + r * context, context};
    }
    std::span<const uint8_t> mask_row(size_t r) const { return {mask.data() + r * context, context}; }
};

// Shuffles document order (deterministically from the seed), joins the
// documents with `eod_id` between them, slices the stream into
// context-length rows dropping the final partial row, and groups rows into
// batches of at most batch_size.
std::vector<Batch> pack_documents(const std::vector<std::vector<int>>& docs, size_t context,
                                  size_t batch_size, int eod_id, uint64_t seed);

// Linear warmup to the peak, then cosine decay to min_lr_fraction * peak.
// Boundary values are exact: 0 at step 0, peak at warmup_steps,
// min_lr_fraction * peak at total_steps.
double lr_at(size_t step, const TrainConfig& tc);

struct LossResult {
    double loss = 0.0;                // sum(mask * nll) / sum(mask)
    std::vector<double> token_nll;    // per position, defined where mask is 1
    size_t mask_total = 0;
};

// Numerically stable log-softmax NLL over the masked positions.
template <typename T>
LossResult masked_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                std::span<const uint8_t> mask) {
    const size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n || mask.size() != n)
        throw DomainError("masked_cross_entropy: shape mismatch");
    LossResult res;
    res.token_nll.assign(n, 0.0);
    double sum = 0.0;
    size_t count = 0;
    for (size_t t = 0; t < n; ++t) {
        if (!mask[t]) continue;
        const T* row = logits.row(t);
        double mx = double(row[0]);
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
        double lse = 0.0;
        for (size_t j = 0; j < v; ++j) lse += std::exp(double(row[j]) - mx);
        lse = mx + std::log(lse);
        const double nll = lse - double(row[size_t(targets[t])]);
        res.token_nll[t] = nll;
        sum += nll;
        ++count;
    }
    if (count == 0) throw DomainError("masked_cross_entropy: mask selects no positions");
    res.loss = sum / double(count);
    res.mask_total = count;
    return res;
}

// dL/dlogits for the global-mean masked loss: (softmax - onehot) * mask / total.
template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, std::span<const int> targets,
                             std::span<const uint8_t> mask, size_t mask_total) {
    const size_t n = logits.rows(), v = logits.cols();
    Tensor<T> d(n, v);
    for (size_t t = 0; t < n; ++t) {
        if (!mask[t]) continue;
        const T* row = logits.row(t);
        T* drow = d.row(t);
        double mx = double(row[0]);
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
        double denom = 0.0;
        for (size_t j = 0; j < v; ++j) denom += std::exp(double(row[j]) - mx);
        const double scale = 1.0 / (denom * double(mask_total));
        for (size_t j = 0; j < v; ++j) drow[j] = T(std::exp(double(row[j]) - mx) * scale);
        drow[size_t(targets[t])] -= T(1.0 / double(mask_total));
    }
    return d;
}

namespace detail {

// dgain += dy ⊙ x / rms;  dx = g ⊙ dy / rms - x * dot(g ⊙ dy, x) / (H rms^3)
template <typename T>
void rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                      Tensor<T>& dx, Tensor<T>& dgain, bool acc_dx) {
    const size_t rows = x.rows(), cols = x.cols();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 1)
#endif
    for (size_t i = 0; i < rows; ++i) {
        const T* xr = x.row(i);
        const T* dyr = dy.row(i);
        T* dxr = dx.row(i);
        T ss = T(0);
#ifdef _OPENMP
#pragma omp simd reduction(+ : ss)
#endif
        for (size_t j = 0; j < cols; ++j) ss += xr[j] * xr[j];
        const T u = ss / T(cols) + T(core::kRmsEps);
        const T inv = T(1) / std::sqrt(u);
        T s = T(0);
#ifdef _OPENMP
#pragma omp simd reduction(+ : s)
#endif
        for (size_t j = 0; j < cols; ++j) s += dyr[j] * gain.data[j] * xr[j];
        const T coef = s * inv * inv * inv / T(cols);
        for (size_t j = 0; j < cols; ++j) {
            const T val = gain.data[j] * dyr[j] * inv - xr[j] * coef;
            dxr[j] = acc_dx ? dxr[j] + val : val;
        }
    }
    // Serial: dgain is shared across rows.
    for (size_t i = 0; i < rows; ++i) {
        const T* xr = x.row(i);
        const T* dyr = dy.row(i);
        T ss = T(0);
        for (size_t j = 0; j < cols; ++j) ss += xr[j] * xr[j];
        const T inv = T(1) / std::sqrt(ss / T(cols) + T(core::kRmsEps));
        for (size_t j = 0; j < cols; ++j) dgain.data[j] += dyr[j] * xr[j] * inv;
    }
}

} // namespace detail

// Accumulates parameter gradients for one traced sequence. `grads` must be
// shaped like the weights (make_weights) and may carry prior contributions.
template <typename T>
void backward(const core::ModelConfig& cfg, const core::Weights<T>& w,
              const core::ForwardTrace<T>& trace, const Tensor<T>& dlogits,
              core::Weights<T>& grads) {
    using kern::matmul_nn;
    using kern::matmul_nt;
    using kern::matmul_tn;
    const size_t H = cfg.hidden, F = cfg.ffn_hidden, V = cfg.vocab_size;
    const size_t heads = cfg.n_heads, hd = cfg.head_dim();
    const size_t seq = trace.ids.size();
    const T c = T(trace.plan.logit_scale / std::sqrt(double(hd)));

    Tensor<T> dx(seq, H);
    // Output head.
    if (cfg.tie_embeddings) {
        matmul_nn(dlogits.data.data(), V, w.input_embedding.data.data(), H, dx.data.data(), H,
                  seq, V, H);
        matmul_tn(dlogits.data.data(), V, trace.normed_final.data.data(), H,
                  grads.input_embedding.data.data(), H, V, seq, H, true);
    } else {
        matmul_nt(dlogits.data.data(), V, w.output_projection.data.data(), V, dx.data.data(), H,
                  seq, V, H);
        matmul_tn(trace.normed_final.data.data(), H, dlogits.data.data(), V,
                  grads.output_projection.data.data(), V, H, seq, V, true);
    }
    // dx currently holds d(normed_final); push through the final norm.
    {
        Tensor<T> dxf(seq, H);
        detail::rmsnorm_backward(trace.x_final, w.final_norm_gain, dx, dxf, grads.final_norm_gain,
                                 false);
        dx = std::move(dxf);
    }

    Tensor<T> dnormed(seq, H), dgate(seq, F), dup(seq, F), dact(seq, F);
    Tensor<T> dq(seq, H), dk(seq, H), dv(seq, H), dctx(seq, H), dbranch(seq, H);

    for (size_t l = cfg.n_layers; l-- > 0;) {
        const auto& lw = w.layers[l];
        auto& gl = grads.layers[l];
        const auto& lt = trace.layers[l];

        // FFN block. dx is dL/d(x_out) with x_out = x_mid + drop(ffn_out).
        dbranch = dx;
        if (lt.ffn_drop_mask.element_count())
            for (size_t i = 0; i < seq * H; ++i) dbranch.data[i] *= lt.ffn_drop_mask.data[i];
        // act = swish(gate_pre) ⊙ up
        for (size_t i = 0; i < seq * F; ++i)
            dact.data[i] = T(core::swish(double(lt.gate_pre.data[i]))); // reuse as act buffer
        Tensor<T>& act = dact;
        for (size_t i = 0; i < seq * F; ++i) act.data[i] *= lt.up.data[i];
        matmul_tn(act.data.data(), F, dbranch.data.data(), H, gl.w_down.data.data(), H, F, seq, H,
                  true);
        Tensor<T> dact2(seq, F);
        matmul_nt(dbranch.data.data(), H, lw.w_down.data.data(), H, dact2.data.data(), F, seq, H,
                  F);
        for (size_t i = 0; i < seq * F; ++i) {
            const double z = double(lt.gate_pre.data[i]);
            const double sig = core::sigmoid(z);
            const double sw = z * sig;
            dup.data[i] = dact2.data[i] * T(sw);
            dgate.data[i] = dact2.data[i] * lt.up.data[i] * T(sig * (1.0 + z * (1.0 - sig)));
        }
        matmul_tn(lt.normed_ffn.data.data(), H, dup.data.data(), F, gl.w_up.data.data(), F, H,
                  seq, F, true);
        matmul_tn(lt.normed_ffn.data.data(), H, dgate.data.data(), F, gl.w_gate.data.data(), F, H,
                  seq, F, true);
        matmul_nt(dup.data.data(), F, lw.w_up.data.data(), F, dnormed.data.data(), H, seq, F, H);
        matmul_nt(dgate.data.data(), F, lw.w_gate.data.data(), F, dnormed.data.data(), H, seq, F,
                  H, true);
        // Residual: dL/d(x_mid) = dx + norm-backward(dnormed).
        detail::rmsnorm_backward(lt.x_mid, lw.ffn_norm_gain, dnormed, dx, gl.ffn_norm_gain, true);

        // Attention block. dx is dL/d(x_mid) with x_mid = x_in + drop(attn_out).
        dbranch = dx;
        if (lt.attn_drop_mask.element_count())
            for (size_t i = 0; i < seq * H; ++i) dbranch.data[i] *= lt.attn_drop_mask.data[i];
        matmul_tn(lt.ctx.data.data(), H, dbranch.data.data(), H, gl.wo.data.data(), H, H, seq, H,
                  true);
        matmul_nt(dbranch.data.data(), H, lw.wo.data.data(), H, dctx.data.data(), H, seq, H, H);

        dq.zero();
        dk.zero();
        dv.zero();
        Tensor<T> dprobs(seq, seq);
        for (size_t h = 0; h < heads; ++h) {
            const size_t off = h * hd;
            const Tensor<T>& probs = lt.probs[h];
            // dprobs = dctx_h v_h^T
            matmul_nt(dctx.data.data() + off, H, lt.v.data.data() + off, H, dprobs.data.data(),
                      seq, seq, hd, seq);
            // dv_h += probs^T dctx_h
            matmul_tn(probs.data.data(), seq, dctx.data.data() + off, H, dv.data.data() + off, H,
                      seq, seq, hd, true);
            // softmax backward, in place on dprobs
            for (size_t i = 0; i < seq; ++i) {
                const T* pr = probs.row(i);
                T* dpr = dprobs.row(i);
                T dot = T(0);
                for (size_t j = 0; j < seq; ++j) dot += dpr[j] * pr[j];
                for (size_t j = 0; j < seq; ++j) dpr[j] = pr[j] * (dpr[j] - dot);
            }
            // dq_h = c * dscores k_h ; dk_h = c * dscores^T q_h
            matmul_nn(dprobs.data.data(), seq, lt.k_rot.data.data() + off, H,
                      dq.data.data() + off, H, seq, seq, hd);
            matmul_tn(dprobs.data.data(), seq, lt.q_rot.data.data() + off, H,
                      dk.data.data() + off, H, seq, seq, hd);
        }
        for (size_t i = 0; i < seq * H; ++i) {
            dq.data[i] *= c;
            dk.data[i] *= c;
        }
        // Undo the rotations (training traces always start at position 0).
        apply_rope(dq.data.data(), seq, heads, hd, 0, trace.plan.rope, -1);
        apply_rope(dk.data.data(), seq, heads, hd, 0, trace.plan.rope, -1);

        for (size_t t = 0; t < seq; ++t) {
            const T* dqr = dq.row(t);
            const T* dkr = dk.row(t);
            const T* dvr = dv.row(t);
            for (size_t j = 0; j < H; ++j) {
                gl.bq.data[j] += dqr[j];
                gl.bk.data[j] += dkr[j];
                gl.bv.data[j] += dvr[j];
            }
        }
        matmul_tn(lt.normed_attn.data.data(), H, dq.data.data(), H, gl.wq.data.data(), H, H, seq,
                  H, true);
        matmul_tn(lt.normed_attn.data.data(), H, dk.data.data(), H, gl.wk.data.data(), H, H, seq,
                  H, true);
        matmul_tn(lt.normed_attn.data.data(), H, dv.data.data(), H, gl.wv.data.data(), H, H, seq,
                  H, true);
        matmul_nt(dq.data.data(), H, lw.wq.data.data(), H, dnormed.data.data(), H, seq, H, H);
        matmul_nt(dk.data.data(), H, lw.wk.data.data(), H, dnormed.data.data(), H, seq, H, H,
                  true);
        matmul_nt(dv.data.data(), H, lw.wv.data.data(), H, dnormed.data.data(), H, seq, H, H,
                  true);
        detail::rmsnorm_backward(lt.x_in, lw.attn_norm_gain, dnormed, dx, gl.attn_norm_gain,
                                 true);
    }

    for (size_t t = 0; t < seq; ++t) {
        T* grow = grads.input_embedding.row(size_t(trace.ids[t]));
        const T* dxr = dx.row(t);
        for (size_t j = 0; j < H; ++j) grow[j] += dxr[j];
    }
}

template <typename T>
struct AdamWState {
    core::Weights<T> m, v;
    size_t step = 0; // completed updates

    static AdamWState init(const core::ModelConfig& cfg) {
        return {core::make_weights<T>(cfg), core::make_weights<T>(cfg), 0};
    }
};

struct StepMetrics {
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    size_t tokens = 0;
};

// One optimizer step over a batch: forward with traces, global masked loss,
// backward, global-norm clip, AdamW with decoupled decay (norm gains and
// biases are never decayed).
template <typename T>
StepMetrics train_step(const core::ModelConfig& cfg, core::Weights<T>& w, const Batch& batch,
                       AdamWState<T>& opt, const TrainConfig& tc, size_t step,
                       Rng* dropout_rng = nullptr) {
    if (batch.rows == 0) throw DomainError("train_step: empty batch");
    const size_t B = batch.rows;

    std::vector<core::ForwardTrace<T>> traces(B);
    std::vector<Tensor<T>> logits(B);
    if (tc.dropout > 0.0) {
        if (!dropout_rng) throw DomainError("train_step: dropout requires an rng");
        for (auto& t : traces) {
            t.dropout = tc.dropout;
            t.rng = dropout_rng;
        }
        // Dropout draws must be sequential to stay reproducible.
        for (size_t s = 0; s < B; ++s)
            logits[s] = core::forward<T>(cfg, w, batch.input_row(s), {}, nullptr, &traces[s]);
    } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (B > 1 && kern::max_threads() > 1)
#endif
        for (size_t s = 0; s < B; ++s)
            logits[s] = core::forward<T>(cfg, w, batch.input_row(s), {}, nullptr, &traces[s]);
    }

    size_t mask_total = 0;
    for (size_t s = 0; s < B; ++s)
        for (uint8_t m : batch.mask_row(s)) mask_total += m;
    if (mask_total == 0) throw DomainError("train_step: batch mask selects no positions");

    double loss_sum = 0.0;
    for (size_t s = 0; s < B; ++s) {
        const auto mrow = batch.mask_row(s);
        if (std::find(mrow.begin(), mrow.end(), uint8_t(1)) == mrow.end()) continue;
        const auto res = masked_cross_entropy(logits[s], batch.target_row(s), mrow);
        loss_sum += res.loss * double(res.mask_total);
    }
    const double loss = loss_sum / double(mask_total);
    if (!std::isfinite(loss))
        throw NonFiniteLossError("train_step: non-finite loss " + std::to_string(loss) +
                                 " at step " + std::to_string(step));

    std::vector<core::Weights<T>> grad_bufs(B);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (B > 1 && kern::max_threads() > 1)
#endif
    for (size_t s = 0; s < B; ++s) {
        grad_bufs[s] = core::make_weights<T>(cfg);
        const auto dlogits =
            cross_entropy_grad(logits[s], batch.target_row(s), batch.mask_row(s), mask_total);
        backward(cfg, w, traces[s], dlogits, grad_bufs[s]);
    }

    core::Weights<T>& grads = grad_bufs[0];
    auto gparams = core::parameters(grads, cfg);
    for (size_t s = 1; s < B; ++s) {
        auto sp = core::parameters(grad_bufs[s], cfg);
        for (size_t p = 0; p < gparams.size(); ++p) {
            const auto& src = sp[p].tensor->data;
            auto& dst = gparams[p].tensor->data;
            for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    }

    double sq = 0.0;
    for (auto& pr : gparams)
        for (const T g : pr.tensor->data) sq += double(g) * double(g);
    const double grad_norm = std::sqrt(sq);
    if (!std::isfinite(grad_norm))
        throw NonFiniteLossError("train_step: non-finite gradient norm at step " +
                                 std::to_string(step) + " (loss " + std::to_string(loss) + ")");
    const double clip_scale =
        (tc.grad_clip > 0.0 && grad_norm > tc.grad_clip) ? tc.grad_clip / grad_norm : 1.0;

    const double lr = lr_at(step, tc);
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(tc.beta1, double(opt.step));
    const double bc2 = 1.0 - std::pow(tc.beta2, double(opt.step));

    auto wparams = core::parameters(w, cfg);
    auto mparams = core::parameters(opt.m, cfg);
    auto vparams = core::parameters(opt.v, cfg);
    for (size_t p = 0; p < wparams.size(); ++p) {
        auto& wd = wparams[p].tensor->data;
        auto& md = mparams[p].tensor->data;
        auto& vd = vparams[p].tensor->data;
        const auto& gd = gparams[p].tensor->data;
        const bool decay = wparams[p].decay && tc.weight_decay > 0.0;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (wd.size() > 4096)
#endif
        for (size_t i = 0; i < wd.size(); ++i) {
            const double g = double(gd[i]) * clip_scale;
            const double m = tc.beta1 * double(md[i]) + (1.0 - tc.beta1) * g;
            const double v = tc.beta2 * double(vd[i]) + (1.0 - tc.beta2) * g * g;
            md[i] = T(m);
            vd[i] = T(v);
            double upd = (m / bc1) / (std::sqrt(v / bc2) + tc.eps);
            if (decay) upd += tc.weight_decay * double(wd[i]);
            wd[i] = T(double(wd[i]) - lr * upd);
        }
    }

    return {loss, grad_norm, lr, mask_total};
}

} // namespace desklm::train
