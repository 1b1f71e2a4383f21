#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "desklm/model.hpp"
#include "desklm/rng.hpp"
#include "desklm/training.hpp"

using namespace desklm;

namespace {

core::ModelConfig grad_check_config() {
    core::ModelConfig cfg;
    cfg.vocab_size = 48;
    cfg.hidden = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.train_context = 32;
    cfg.precision = core::Precision::f64;
    cfg.finalize();
    cfg.validate();
    return cfg;
}

train::Batch single_row_batch(const std::vector<int>& ids, const std::vector<int>& targets,
                              std::vector<uint8_t> mask) {
    train::Batch b;
    b.rows = 1;
    b.context = ids.size();
    b.inputs = ids;
    b.targets = targets;
    b.mask = std::move(mask);
    return b;
}

double batch_loss(const core::ModelConfig& cfg, const core::Weights<double>& w,
                  const train::Batch& b) {
    const auto logits = core::forward<double>(cfg, w, b.input_row(0));
    return train::masked_cross_entropy(logits, b.target_row(0), b.mask_row(0)).loss;
}

} // namespace

TEST_CASE("pack_documents follows the shuffle/merge/truncate rule") {
    // Seed 2 leaves a two-document order unchanged under the engine's
    // deterministic shuffle (checked below), which makes the example exact.
    const uint64_t identity_seed = 2;
    const int eod = 99;

    SUBCASE("separator joining and partial-row dropping") {
        const std::vector<std::vector<int>> docs = {{10, 11}, {12, 13}};
        const auto batches = train::pack_documents(docs, 3, 8, eod, identity_seed);
        REQUIRE(batches.size() == 1);
        const auto& b = batches[0];
        REQUIRE(b.rows == 1); // stream 10,11,eod,12,13 -> one full row, [12,13] dropped
        CHECK(std::vector<int>(b.inputs.begin(), b.inputs.end()) ==
              std::vector<int>{10, 11, eod});
        CHECK(std::vector<int>(b.targets.begin(), b.targets.end()) ==
              std::vector<int>{11, eod, 12});
        CHECK(std::vector<uint8_t>(b.mask.begin(), b.mask.end()) ==
              std::vector<uint8_t>{1, 1, 1});
    }
    SUBCASE("one doc of exactly context length forms one full row") {
        const std::vector<std::vector<int>> docs = {{1, 2, 3}};
        const auto batches = train::pack_documents(docs, 3, 8, eod, identity_seed);
        REQUIRE(batches.size() == 1);
        REQUIRE(batches[0].rows == 1);
        CHECK(std::vector<int>(batches[0].inputs.begin(), batches[0].inputs.end()) ==
              std::vector<int>{1, 2, 3});
        // The shifted target falls off the stream end: padded and masked out.
        CHECK(batches[0].mask == std::vector<uint8_t>{1, 1, 0});
    }
    SUBCASE("same seed gives an identical batch stream, different seeds may not") {
        std::vector<std::vector<int>> docs;
        Rng rng(4);
        for (int d = 0; d < 20; ++d) {
            std::vector<int> doc(3 + rng.below(20));
            for (auto& t : doc) t = int(rng.below(90));
            docs.push_back(doc);
        }
        const auto a = train::pack_documents(docs, 8, 4, eod, 123);
        const auto b = train::pack_documents(docs, 8, 4, eod, 123);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].inputs == b[i].inputs);
            CHECK(a[i].targets == b[i].targets);
            CHECK(a[i].mask == b[i].mask);
        }
    }
    SUBCASE("empty document stream packs to nothing") {
        CHECK(train::pack_documents({}, 4, 2, eod, 1).empty());
    }
    SUBCASE("context below two is rejected") {
        CHECK_THROWS_AS(train::pack_documents({{1, 2}}, 1, 2, eod, 1), DomainError);
    }
}

TEST_CASE("learning-rate schedule endpoints are exact") {
    train::TrainConfig tc;
    tc.peak_lr = 3e-4; // the configured peak for every published size
    tc.warmup_steps = 100;
    tc.total_steps = 1000;
    tc.validate();

    CHECK(train::lr_at(0, tc) == 0.0);
    CHECK(train::lr_at(100, tc) == tc.peak_lr);
    CHECK(train::lr_at(1000, tc) == 0.1 * tc.peak_lr);

    // Monotone warmup, then decay towards the floor.
    for (size_t s = 1; s <= 100; ++s) CHECK(train::lr_at(s, tc) >= train::lr_at(s - 1, tc));
    for (size_t s = 101; s <= 1000; ++s) {
        CHECK(train::lr_at(s, tc) <= tc.peak_lr);
        CHECK(train::lr_at(s, tc) >= 0.1 * tc.peak_lr);
        CHECK(train::lr_at(s, tc) <= train::lr_at(s - 1, tc));
    }
    CHECK_THROWS_AS(train::lr_at(1001, tc), DomainError);

    train::TrainConfig bad = tc;
    bad.warmup_steps = 2000;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad = tc;
    bad.min_lr_fraction = 0.0;
    CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("masked cross entropy") {
    SUBCASE("uniform logits cost ln V") {
        const size_t n = 6, v = 40;
        Tensor<double> logits(n, v); // all zero = uniform
        std::vector<int> targets(n, 3);
        std::vector<uint8_t> mask(n, 1);
        const auto res = train::masked_cross_entropy(logits, targets, mask);
        CHECK(res.loss == doctest::Approx(std::log(double(v))).epsilon(1e-12));
        CHECK(res.mask_total == n);
    }
    SUBCASE("masking half the tokens equals scoring the kept half alone") {
        Rng rng(31);
        const size_t n = 10, v = 17;
        Tensor<double> logits(n, v);
        for (auto& x : logits.data) x = rng.normal() * 2.0;
        std::vector<int> targets(n);
        for (auto& t : targets) t = int(rng.below(v));
        std::vector<uint8_t> mask(n, 0);
        for (size_t i = 0; i < n; i += 2) mask[i] = 1;

        const auto masked = train::masked_cross_entropy(logits, targets, mask);

        Tensor<double> kept_logits(n / 2, v);
        std::vector<int> kept_targets;
        std::vector<uint8_t> kept_mask(n / 2, 1);
        size_t r = 0;
        for (size_t i = 0; i < n; i += 2, ++r) {
            std::copy(logits.row(i), logits.row(i) + v, kept_logits.row(r));
            kept_targets.push_back(targets[i]);
        }
        const auto subset = train::masked_cross_entropy(kept_logits, kept_targets, kept_mask);
        CHECK(std::abs(masked.loss - subset.loss) < 1e-12);
    }
    SUBCASE("gradient at masked positions is exactly zero") {
        Rng rng(32);
        const size_t n = 8, v = 9;
        Tensor<double> logits(n, v);
        for (auto& x : logits.data) x = rng.normal();
        std::vector<int> targets(n, 1);
        std::vector<uint8_t> mask(n, 1);
        mask[2] = mask[5] = 0;
        const auto d = train::cross_entropy_grad(logits, targets, mask, n - 2);
        for (size_t j = 0; j < v; ++j) {
            CHECK(d(2, j) == 0.0);
            CHECK(d(5, j) == 0.0);
        }
    }
    SUBCASE("empty mask is a domain error") {
        Tensor<double> logits(3, 4);
        std::vector<int> targets(3, 0);
        std::vector<uint8_t> mask(3, 0);
        CHECK_THROWS_AS(train::masked_cross_entropy(logits, targets, mask), DomainError);
    }
}

TEST_CASE("analytic gradients match central finite differences everywhere") {
    const auto cfg = grad_check_config();
    auto w = core::init_weights<double>(cfg, 41);

    Rng rng(42);
    const size_t seq = 12;
    std::vector<int> ids(seq), targets(seq);
    for (auto& t : ids) t = int(rng.below(cfg.vocab_size));
    for (auto& t : targets) t = int(rng.below(cfg.vocab_size));
    std::vector<uint8_t> mask(seq, 1);
    mask[4] = 0; // keep one masked position in play
    const auto batch = single_row_batch(ids, targets, mask);

    // Analytic gradient.
    core::ForwardTrace<double> trace;
    const auto logits = core::forward<double>(cfg, w, batch.input_row(0), {}, nullptr, &trace);
    const auto res = train::masked_cross_entropy(logits, batch.target_row(0), batch.mask_row(0));
    const auto dlogits =
        train::cross_entropy_grad(logits, batch.target_row(0), batch.mask_row(0), res.mask_total);
    auto grads = core::make_weights<double>(cfg);
    train::backward(cfg, w, trace, dlogits, grads);

    auto wparams = core::parameters(w, cfg);
    auto gparams = core::parameters(grads, cfg);
    const double h = 1e-5;
    double worst = 0.0;
    size_t checked = 0;
    Rng pick(43);
    for (size_t p = 0; p < wparams.size(); ++p) {
        auto& tensor = *wparams[p].tensor;
        const size_t samples = 200 / wparams.size() + 2;
        for (size_t s = 0; s < samples; ++s) {
            size_t idx = size_t(pick.below(tensor.data.size()));
            if (wparams[p].name == "input_embedding") {
                // Only rows that appear in the batch receive gradient.
                const size_t col = idx % cfg.hidden;
                idx = size_t(ids[pick.below(seq)]) * cfg.hidden + col;
            }
            const double saved = tensor.data[idx];
            tensor.data[idx] = saved + h;
            const double up = batch_loss(cfg, w, batch);
            tensor.data[idx] = saved - h;
            const double down = batch_loss(cfg, w, batch);
            tensor.data[idx] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = gparams[p].tensor->data[idx];
            // Floor the denominator: central differences carry ~1e-10 of
            // absolute roundoff here, so sub-1e-6 gradients are judged by
            // absolute rather than relative agreement.
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
            ++checked;
        }
    }
    CHECK(checked >= 200);
    CHECK(worst < 1e-4);
}

TEST_CASE("masked targets cannot influence any gradient") {
    const auto cfg = grad_check_config();
    auto w = core::init_weights<double>(cfg, 51);
    Rng rng(52);
    const size_t seq = 10;
    std::vector<int> ids(seq), targets(seq);
    for (auto& t : ids) t = int(rng.below(cfg.vocab_size));
    for (auto& t : targets) t = int(rng.below(cfg.vocab_size));
    std::vector<uint8_t> mask(seq, 1);
    mask[3] = 0;

    auto grad_of = [&](int masked_target) {
        auto tgt = targets;
        tgt[3] = masked_target;
        core::ForwardTrace<double> trace;
        const auto logits = core::forward<double>(cfg, w, std::span<const int>(ids), {}, nullptr,
                                                  &trace);
        const auto res = train::masked_cross_entropy(logits, tgt, mask);
        const auto d = train::cross_entropy_grad(logits, tgt, mask, res.mask_total);
        auto g = core::make_weights<double>(cfg);
        train::backward(cfg, w, trace, d, g);
        return g;
    };
    const auto g1 = grad_of(0);
    const auto g2 = grad_of(int(cfg.vocab_size) - 1);
    auto p1 = core::parameters(const_cast<core::Weights<double>&>(g1), cfg);
    auto p2 = core::parameters(const_cast<core::Weights<double>&>(g2), cfg);
    for (size_t p = 0; p < p1.size(); ++p) REQUIRE(p1[p].tensor->data == p2[p].tensor->data);
}

TEST_CASE("train_step behavior") {
    const auto cfg = grad_check_config();
    Rng rng(61);
    const size_t seq = 16;
    std::vector<int> ids(seq);
    for (auto& t : ids) t = int(rng.below(cfg.vocab_size));
    std::vector<int> targets(ids.begin() + 1, ids.end());
    targets.push_back(ids[0]);
    const auto batch = single_row_batch(ids, targets, std::vector<uint8_t>(seq, 1));

    train::TrainConfig tc;
    tc.peak_lr = 3e-3;
    tc.warmup_steps = 5;
    tc.total_steps = 60;
    tc.weight_decay = 0.1;
    tc.batch_size = 1;
    tc.context = seq;

    SUBCASE("loss decreases while fitting one batch") {
        auto w = core::init_weights<double>(cfg, 62);
        auto opt = train::AdamWState<double>::init(cfg);
        double first = 0.0, last = 0.0;
        for (size_t step = 0; step < 40; ++step) {
            const auto m = train::train_step(cfg, w, batch, opt, tc, step);
            if (step == 0) first = m.loss;
            last = m.loss;
            CHECK(std::isfinite(m.grad_norm));
            CHECK(m.lr == train::lr_at(step, tc));
            CHECK(m.tokens == seq);
        }
        CHECK(last < 0.7 * first);
    }
    SUBCASE("inactive clipping thresholds produce identical updates") {
        auto w1 = core::init_weights<double>(cfg, 63);
        auto w2 = w1;
        auto o1 = train::AdamWState<double>::init(cfg);
        auto o2 = train::AdamWState<double>::init(cfg);
        auto tc_loose = tc;
        tc_loose.grad_clip = 1e6;
        auto tc_inf = tc;
        tc_inf.grad_clip = std::numeric_limits<double>::infinity();
        const auto m1 = train::train_step(cfg, w1, batch, o1, tc_loose, 10);
        const auto m2 = train::train_step(cfg, w2, batch, o2, tc_inf, 10);
        CHECK(m1.grad_norm == m2.grad_norm);
        CHECK(m1.grad_norm < 1e6); // both clips inactive
        REQUIRE(w1.input_embedding.data == w2.input_embedding.data);
        REQUIRE(w1.layers[0].w_gate.data == w2.layers[0].w_gate.data);
    }
    SUBCASE("fixed seed reproduces the loss trajectory bit for bit") {
        std::vector<double> run1, run2;
        for (auto* sink : {&run1, &run2}) {
            auto w = core::init_weights<double>(cfg, 64);
            auto opt = train::AdamWState<double>::init(cfg);
            for (size_t step = 0; step < 5; ++step)
                sink->push_back(train::train_step(cfg, w, batch, opt, tc, step).loss);
        }
        REQUIRE(run1 == run2);
    }
    SUBCASE("weight decay leaves gains and biases untouched") {
        // With zero gradient everywhere (mask forces loss on one position of
        // a frozen target equal to... easier: compare decayed vs undecayed runs)
        auto w1 = core::init_weights<double>(cfg, 65);
        auto w2 = w1;
        auto o1 = train::AdamWState<double>::init(cfg);
        auto o2 = train::AdamWState<double>::init(cfg);
        auto tc_decay = tc;
        tc_decay.weight_decay = 0.5;
        auto tc_none = tc;
        tc_none.weight_decay = 0.0;
        train::train_step(cfg, w1, batch, o1, tc_decay, 10);
        train::train_step(cfg, w2, batch, o2, tc_none, 10);
        // Norm gains and QKV biases receive identical (undecayed) updates.
        REQUIRE(w1.final_norm_gain.data == w2.final_norm_gain.data);
        REQUIRE(w1.layers[0].bq.data == w2.layers[0].bq.data);
        // Decayed matrices differ.
        CHECK(w1.layers[0].w_gate.data != w2.layers[0].w_gate.data);
    }
    SUBCASE("non-finite loss aborts with diagnostics") {
        auto w = core::init_weights<double>(cfg, 66);
        w.input_embedding.data[size_t(ids[0]) * cfg.hidden] =
            std::numeric_limits<double>::quiet_NaN();
        auto opt = train::AdamWState<double>::init(cfg);
        CHECK_THROWS_AS(train::train_step(cfg, w, batch, opt, tc, 0), NonFiniteLossError);
    }
    SUBCASE("dropout draws are reproducible and zero out activations") {
        auto tc_drop = tc;
        tc_drop.dropout = 0.3;
        auto run = [&](uint64_t seed) {
            auto w = core::init_weights<double>(cfg, 67);
            auto opt = train::AdamWState<double>::init(cfg);
            Rng drop_rng(seed);
            std::vector<double> losses;
            for (size_t step = 0; step < 3; ++step)
                losses.push_back(
                    train::train_step(cfg, w, batch, opt, tc_drop, step, &drop_rng).loss);
            return losses;
        };
        REQUIRE(run(5) == run(5));
        CHECK(run(5) != run(6));
        CHECK_THROWS_AS(
            [&] {
                auto w = core::init_weights<double>(cfg, 68);
                auto opt = train::AdamWState<double>::init(cfg);
                train::train_step(cfg, w, batch, opt, tc_drop, 0, nullptr);
            }(),
            DomainError);
    }
}
