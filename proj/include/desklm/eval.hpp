#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "desklm/errors.hpp"
#include "desklm/extension.hpp"
#include "desklm/model.hpp"
#include "desklm/rng.hpp"

// Perplexity harness and sampling. Sequences are scored with one
// full-length forward pass per sequence (no sliding re-scoring); that is
// the protocol under which a short-context model visibly degrades beyond
// its training length and the extension techniques recover it.

namespace desklm::eval {

struct PplRow {
    std::string label; // technique-set label
    size_t length = 0;
    double ppl = 0.0;
};

struct PplReport {
    std::string model_id;
    std::string corpus_id;
    std::vector<PplRow> rows;

    // ppl > 0 and lengths strictly increasing within a label.
    void validate() const;
    double at(const std::string& label, size_t length) const;
};

std::string to_csv(const PplReport& report);
// Minimal standalone SVG, log-scale perplexity against sequence length.
void write_svg_plot(const PplReport& report, const std::string& path);

struct PplResult {
    double ppl = 0.0;
    size_t sequences_used = 0;
    size_t sequences_skipped = 0; // shorter than eval_len
};

// exp(mean NLL) over positions [1, eval_len) of every usable sequence.
template <typename T>
PplResult perplexity(const core::ModelConfig& cfg, const core::Weights<T>& w,
                     const ext::ExtensionConfig& e, const std::vector<std::vector<int>>& corpus,
                     size_t eval_len) {
    if (eval_len < 2) throw DomainError("perplexity: eval_len must be at least 2");
    PplResult res;
    double nll_sum = 0.0;
    size_t positions = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < eval_len) {
            ++res.sequences_skipped;
            continue;
        }
        std::span<const int> ids(seq.data(), eval_len);
        const auto logits = core::forward<T>(cfg, w, ids, e);
        const size_t v = logits.cols();
        for (size_t t = 0; t + 1 < eval_len; ++t) {
            const T* row = logits.row(t);
            double mx = double(row[0]);
            for (size_t j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
            double lse = 0.0;
            for (size_t j = 0; j < v; ++j) lse += std::exp(double(row[j]) - mx);
            nll_sum += mx + std::log(lse) - double(row[size_t(ids[t + 1])]);
            ++positions;
        }
        ++res.sequences_used;
    }
    if (res.sequences_used == 0)
        throw DomainError("perplexity: no sequence is at least " + std::to_string(eval_len) +
                          " tokens long");
    res.ppl = std::exp(nll_sum / double(positions));
    return res;
}

// Full grid: every technique set at every length. Lengths must be sorted
// ascending; the report carries |sets| * |lengths| rows.
template <typename T>
PplReport length_sweep(const core::ModelConfig& cfg, const core::Weights<T>& w,
                       const std::vector<std::pair<std::string, ext::ExtensionConfig>>& sets,
                       const std::vector<size_t>& lengths,
                       const std::vector<std::vector<int>>& corpus) {
    for (size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw DomainError("length_sweep: lengths must be strictly ascending");
    PplReport report;
    for (const auto& [label, e] : sets) {
        for (size_t len : lengths) {
            const auto r = perplexity<T>(cfg, w, e, corpus, len);
            report.rows.push_back({label, len, r.ppl});
        }
    }
    report.validate();
    return report;
}

struct SamplePolicy {
    enum class Kind { greedy, top_p };
    Kind kind = Kind::greedy;
    double p = 0.9;
    uint64_t seed = 0;
};

// Greedy argmax takes the lowest id on ties; top-p renormalizes the
// smallest probability-sorted prefix with cumulative mass >= p (the prefix
// always contains the argmax). Returns the newly generated ids, including
// the stop id when one is hit.
template <typename T>
std::vector<int> generate(const core::ModelConfig& cfg, const core::Weights<T>& w,
                          const ext::ExtensionConfig& e, std::span<const int> prompt,
                          const SamplePolicy& policy, size_t max_new,
                          const std::vector<int>& stop_ids) {
    if (max_new < 1) throw DomainError("generate: max_new must be >= 1");
    if (policy.kind == SamplePolicy::Kind::top_p && !(policy.p > 0.0 && policy.p <= 1.0))
        throw DomainError("generate: top-p requires p in (0, 1]");
    auto cache = core::make_cache<T>(cfg);
    Rng rng(policy.seed);
    std::vector<int> out;
    std::vector<int> feed(prompt.begin(), prompt.end());
    const size_t v = cfg.vocab_size;
    std::vector<double> probs(v);
    std::vector<size_t> order(v);
    while (out.size() < max_new) {
        const auto logits = core::forward<T>(cfg, w, feed, e, &cache);
        const T* row = logits.row(logits.rows() - 1);
        int next = 0;
        if (policy.kind == SamplePolicy::Kind::greedy) {
            for (size_t j = 1; j < v; ++j)
                if (double(row[j]) > double(row[size_t(next)])) next = int(j);
        } else {
            double mx = double(row[0]);
            for (size_t j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
            double denom = 0.0;
            for (size_t j = 0; j < v; ++j) {
                probs[j] = std::exp(double(row[j]) - mx);
                denom += probs[j];
            }
            for (size_t j = 0; j < v; ++j) probs[j] /= denom;
            for (size_t j = 0; j < v; ++j) order[j] = j;
            std::stable_sort(order.begin(), order.end(),
                             [&](size_t a, size_t b) { return probs[a] > probs[b]; });
            double cum = 0.0;
            size_t keep = 0;
            while (keep < v) {
                cum += probs[order[keep]];
                ++keep;
                if (cum >= policy.p) break;
            }
            double u = rng.uniform() * cum;
            next = int(order[keep - 1]);
            for (size_t j = 0; j < keep; ++j) {
                u -= probs[order[j]];
                if (u <= 0.0) {
                    next = int(order[j]);
                    break;
                }
            }
        }
        out.push_back(next);
        for (int stop : stop_ids)
            if (next == stop) return out;
        feed.assign(1, next);
    }
    return out;
}

} // namespace desklm::eval
