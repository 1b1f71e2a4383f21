// Times the OpenMP kernels against the serial reference implementations on
// model-shaped workloads and reports GFLOP/s plus the speedup. The two
// paths are also cross-checked, so a kernel regression shows up here even
// before the test suite runs.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "desklm/kernels.hpp"
#include "desklm/rng.hpp"

using namespace desklm;

namespace {

double now_sec() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const double t0 = now_sec();
        fn();
        best = std::min(best, now_sec() - t0);
    }
    return best;
}

struct Case {
    const char* name;
    size_t m, k, n;
};

} // namespace

int main() {
    kern::configure_threads();
    std::printf("threads: %d\n", kern::max_threads());
    std::printf("%-28s %10s %10s %8s %9s\n", "kernel", "ref GF/s", "omp GF/s", "speedup",
                "max|diff|");

    Rng rng(1234);
    const Case cases[] = {
        {"matmul_nn 256x128x128", 256, 128, 128},
        {"matmul_nn 256x128x2048", 256, 128, 2048},
        {"matmul_nn 1024x128x344", 1024, 128, 344},
    };
    for (const auto& c : cases) {
        std::vector<float> a(c.m * c.k), b(c.k * c.n), out_ref(c.m * c.n), out_omp(c.m * c.n);
        for (auto& v : a) v = float(rng.normal());
        for (auto& v : b) v = float(rng.normal());
        const double flops = 2.0 * double(c.m) * double(c.k) * double(c.n);
        const double t_ref = time_best_of(
            [&] {
                kern::ref::matmul_nn(a.data(), c.k, b.data(), c.n, out_ref.data(), c.n, c.m, c.k,
                                     c.n);
            },
            3);
        const double t_omp = time_best_of(
            [&] {
                kern::matmul_nn(a.data(), c.k, b.data(), c.n, out_omp.data(), c.n, c.m, c.k, c.n);
            },
            3);
        double max_diff = 0.0;
        for (size_t i = 0; i < out_ref.size(); ++i)
            max_diff = std::max(max_diff, std::abs(double(out_ref[i]) - double(out_omp[i])));
        std::printf("%-28s %10.2f %10.2f %8.2fx %9.2e\n", c.name, flops / t_ref / 1e9,
                    flops / t_omp / 1e9, t_ref / t_omp, max_diff);
    }

    {
        const size_t rows = 1024, cols = 1024;
        std::vector<float> x(rows * cols), gain(cols, 1.0f), y_ref(rows * cols),
            y_omp(rows * cols);
        for (auto& v : x) v = float(rng.normal());
        const double flops = 3.0 * double(rows) * double(cols);
        const double t_ref = time_best_of(
            [&] { kern::ref::rmsnorm(x.data(), gain.data(), y_ref.data(), rows, cols, 1e-6f); },
            5);
        const double t_omp = time_best_of(
            [&] { kern::rmsnorm(x.data(), gain.data(), y_omp.data(), rows, cols, 1e-6f); }, 5);
        double max_diff = 0.0;
        for (size_t i = 0; i < y_ref.size(); ++i)
            max_diff = std::max(max_diff, std::abs(double(y_ref[i]) - double(y_omp[i])));
        std::printf("%-28s %10.2f %10.2f %8.2fx %9.2e\n", "rmsnorm 1024x1024",
                    flops / t_ref / 1e9, flops / t_omp / 1e9, t_ref / t_omp, max_diff);
    }

    {
        const size_t rows = 512, cols = 512;
        std::vector<float> base(rows * cols);
        for (auto& v : base) v = float(rng.normal());
        std::vector<float> s_ref = base, s_omp = base;
        const double flops = 5.0 * double(rows) * double(cols);
        const double t_ref = time_best_of(
            [&] {
                s_ref = base;
                kern::ref::softmax_rows(s_ref.data(), rows, cols);
            },
            5);
        const double t_omp = time_best_of(
            [&] {
                s_omp = base;
                kern::softmax_rows(s_omp.data(), rows, cols);
            },
            5);
        double max_diff = 0.0;
        for (size_t i = 0; i < s_ref.size(); ++i)
            max_diff = std::max(max_diff, std::abs(double(s_ref[i]) - double(s_omp[i])));
        std::printf("%-28s %10.2f %10.2f %8.2fx %9.2e\n", "softmax_rows 512x512",
                    flops / t_ref / 1e9, flops / t_omp / 1e9, t_ref / t_omp, max_diff);
    }
    return 0;
}
