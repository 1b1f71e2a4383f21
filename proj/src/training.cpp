#include "desklm/training.hpp"

#include <numeric>

namespace desklm::train {

std::vector<Batch> pack_documents(const std::vector<std::vector<int>>& docs, size_t context,
                                  size_t batch_size, int eod_id, uint64_t seed) {
    if (context < 2) throw DomainError("pack_documents: context must be at least 2");
    if (batch_size < 1) throw DomainError("pack_documents: batch_size must be at least 1");

    std::vector<size_t> order(docs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(sub_seed(seed, 0x5ac1));
    rng.shuffle(order);

    std::vector<int> stream;
    size_t total = 0;
    for (const auto& d : docs) total += d.size() + 1;
    stream.reserve(total);
    for (size_t i = 0; i < order.size(); ++i) {
        if (i > 0) stream.push_back(eod_id);
        const auto& d = docs[order[i]];
        stream.insert(stream.end(), d.begin(), d.end());
    }

    const size_t n_rows = stream.size() / context; // final partial row dropped
    std::vector<Batch> batches;
    for (size_t r = 0; r < n_rows; r += batch_size) {
        Batch b;
        b.context = context;
        b.rows = std::min(batch_size, n_rows - r);
        b.inputs.reserve(b.rows * context);
        b.targets.reserve(b.rows * context);
        b.mask.reserve(b.rows * context);
        for (size_t row = r; row < r + b.rows; ++row) {
            const size_t start = row * context;
            for (size_t t = 0; t < context; ++t) {
                b.inputs.push_back(stream[start + t]);
                const size_t tgt = start + t + 1;
                if (tgt < stream.size()) {
                    b.targets.push_back(stream[tgt]);
                    b.mask.push_back(1);
                } else {
                    b.targets.push_back(eod_id); // padding target, masked out
                    b.mask.push_back(0);
                }
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

double lr_at(size_t step, const TrainConfig& tc) {
    if (step > tc.total_steps) throw DomainError("lr_at: step beyond total_steps");
    const double min_lr = tc.min_lr_fraction * tc.peak_lr;
    if (step < tc.warmup_steps)
        return tc.peak_lr * double(step) / double(tc.warmup_steps);
    if (step == tc.warmup_steps) return tc.peak_lr; // exact joint
    if (step == tc.total_steps) return min_lr;      // exact floor
    const double progress =
        double(step - tc.warmup_steps) / double(tc.total_steps - tc.warmup_steps);
    return min_lr + (tc.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

} // namespace desklm::train
