#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

// Row-major kernels behind the model, trainer, and evaluator. The hot
// versions in desklm::kern parallelize across independent output rows
// (OpenMP) and vectorize inner loops (omp simd); desklm::kern::ref holds
// naive serial implementations kept as the oracle for tests and for the
// kernel benchmark. Leading-dimension (ld*) arguments are element strides
// between logical rows, so head-sliced views of larger matrices work
// without copies.

namespace desklm::kern {

// Additive mask value for disallowed attention entries. Finite on purpose:
// -inf turns into NaN as soon as an all-masked row hits exp/normalize.
inline constexpr double kMaskValue = -1e9;
// Row maxima at or below this are treated as fully masked.
inline constexpr double kMaskedRowThreshold = -1e8;

// Honors ENGINE_THREADS; call once at process start.
inline void configure_threads() {
#ifdef _OPENMP
    if (const char* env = std::getenv("ENGINE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
#endif
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace ref {

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void matmul_nn(const T* a, size_t lda, const T* b, size_t ldb, T* c, size_t ldc,
               size_t m, size_t k, size_t n, bool acc = false) {
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            T sum = acc ? c[i * ldc + j] : T(0);
            for (size_t r = 0; r < k; ++r) sum += a[i * lda + r] * b[r * ldb + j];
            c[i * ldc + j] = sum;
        }
    }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void matmul_nt(const T* a, size_t lda, const T* b, size_t ldb, T* c, size_t ldc,
               size_t m, size_t k, size_t n, bool acc = false) {
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            T sum = acc ? c[i * ldc + j] : T(0);
            for (size_t r = 0; r < k; ++r) sum += a[i * lda + r] * b[j * ldb + r];
            c[i * ldc + j] = sum;
        }
    }
}

// c[m x n] (+)= a[k x m]^T * b[k x n]
template <typename T>
void matmul_tn(const T* a, size_t lda, const T* b, size_t ldb, T* c, size_t ldc,
               size_t m, size_t k, size_t n, bool acc = false) {
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            T sum = acc ? c[i * ldc + j] : T(0);
            for (size_t r = 0; r < k; ++r) sum += a[r * lda + i] * b[r * ldb + j];
            c[i * ldc + j] = sum;
        }
    }
}

template <typename T>
void rmsnorm(const T* x, const T* gain, T* y, size_t rows, size_t cols, T eps) {
    for (size_t i = 0; i < rows; ++i) {
        T ss = T(0);
        for (size_t j = 0; j < cols; ++j) ss += x[i * cols + j] * x[i * cols + j];
        const T inv = T(1) / std::sqrt(ss / T(cols) + eps);
        for (size_t j = 0; j < cols; ++j) y[i * cols + j] = gain[j] * x[i * cols + j] * inv;
    }
}

// In-place row softmax; a fully masked row becomes all zeros.
template <typename T>
void softmax_rows(T* x, size_t rows, size_t cols) {
    for (size_t i = 0; i < rows; ++i) {
        T* row = x + i * cols;
        T mx = row[0];
        for (size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        if (double(mx) <= kMaskedRowThreshold) {
            std::fill(row, row + cols, T(0));
            continue;
        }
        T sum = T(0);
        for (size_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (size_t j = 0; j < cols; ++j) row[j] /= sum;
    }
}

} // namespace ref

template <typename T>
void matmul_nn(const T* a, size_t lda, const T* b, size_t ldb, T* c, size_t ldc,
               size_t m, size_t k, size_t n, bool acc = false) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 1)
#endif
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (!acc) std::fill(crow, crow + n, T(0));
        for (size_t r = 0; r < k; ++r) {
            const T av = a[i * lda + r];
            const T* brow = b + r * ldb;
#ifdef _OPENMP
#pragma omp simd
#endif
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_nt(const T* a, size_t lda, const T* b, size_t ldb, T* c, size_t ldc,
               size_t m, size_t k, size_t n, bool acc = false) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 1)
#endif
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * lda;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * ldb;
            T sum = T(0);
#ifdef _OPENMP
#pragma omp simd reduction(+ : sum)
#endif
            for (size_t r = 0; r < k; ++r) sum += arow[r] * brow[r];
            c[i * ldc + j] = acc ? c[i * ldc + j] + sum : sum;
        }
    }
}

template <typename T>
void matmul_tn(const T* a, size_t lda, const T* b, size_t ldb, T* c, size_t ldc,
               size_t m, size_t k, size_t n, bool acc = false) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 1)
#endif
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (!acc) std::fill(crow, crow + n, T(0));
        for (size_t r = 0; r < k; ++r) {
            const T av = a[r * lda + i];
            const T* brow = b + r * ldb;
#ifdef _OPENMP
#pragma omp simd
#endif
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void add_bias(T* x, const T* bias, size_t rows, size_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 1)
#endif
    for (size_t i = 0; i < rows; ++i) {
        T* row = x + i * cols;
        for (size_t j = 0; j < cols; ++j) row[j] += bias[j];
    }
}

template <typename T>
void rmsnorm(const T* x, const T* gain, T* y, size_t rows, size_t cols, T eps) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 1)
#endif
    for (size_t i = 0; i < rows; ++i) {
        const T* xr = x + i * cols;
        T ss = T(0);
#ifdef _OPENMP
#pragma omp simd reduction(+ : ss)
#endif
        for (size_t j = 0; j < cols; ++j) ss += xr[j] * xr[j];
        const T inv = T(1) / std::sqrt(ss / T(cols) + eps);
        T* yr = y + i * cols;
        for (size_t j = 0; j < cols; ++j) yr[j] = gain[j] * xr[j] * inv;
    }
}

template <typename T>
void softmax_rows(T* x, size_t rows, size_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 1)
#endif
    for (size_t i = 0; i < rows; ++i) {
        T* row = x + i * cols;
        T mx = row[0];
        for (size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        if (double(mx) <= kMaskedRowThreshold) {
            std::fill(row, row + cols, T(0));
            continue;
        }
        T sum = T(0);
        for (size_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const T inv = T(1) / sum;
        for (size_t j = 0; j < cols; ++j) row[j] *= inv;
    }
}

} // namespace desklm::kern
