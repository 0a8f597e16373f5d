#include "kernels.hpp"

#include <algorithm>

namespace jemb::kernels {

namespace {

using v4 = double __attribute__((vector_size(32)));

inline v4 load4(const double* p) {
    v4 v;
    __builtin_memcpy(&v, p, sizeof v);
    return v;
}

inline void store4(double* p, v4 v) { __builtin_memcpy(p, &v, sizeof v); }

// C[4x8] += A[4xk] * B[kx8], accumulators held in registers.
inline void micro_4x8(std::size_t k, const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                      std::size_t ldc) {
    v4 c00 = load4(c), c01 = load4(c + 4);
    v4 c10 = load4(c + ldc), c11 = load4(c + ldc + 4);
    v4 c20 = load4(c + 2 * ldc), c21 = load4(c + 2 * ldc + 4);
    v4 c30 = load4(c + 3 * ldc), c31 = load4(c + 3 * ldc + 4);
    const double* a0 = a;
    const double* a1 = a + lda;
    const double* a2 = a + 2 * lda;
    const double* a3 = a + 3 * lda;
    for (std::size_t p = 0; p < k; ++p) {
        const v4 b0 = load4(b + p * ldb);
        const v4 b1 = load4(b + p * ldb + 4);
        c00 += a0[p] * b0;
        c01 += a0[p] * b1;
        c10 += a1[p] * b0;
        c11 += a1[p] * b1;
        c20 += a2[p] * b0;
        c21 += a2[p] * b1;
        c30 += a3[p] * b0;
        c31 += a3[p] * b1;
    }
    store4(c, c00);
    store4(c + 4, c01);
    store4(c + ldc, c10);
    store4(c + ldc + 4, c11);
    store4(c + 2 * ldc, c20);
    store4(c + 2 * ldc + 4, c21);
    store4(c + 3 * ldc, c30);
    store4(c + 3 * ldc + 4, c31);
}

void gemm_edge(std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1, std::size_t p0, std::size_t p1,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    for (std::size_t i = i0; i < i1; ++i) {
        double* crow = c + i * ldc;
        const double* arow = a + i * lda;
        for (std::size_t p = p0; p < p1; ++p) {
            const double av = arow[p];
            const double* brow = b + p * ldb;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a, std::size_t lda,
              const double* __restrict b, std::size_t ldb, double* __restrict c, std::size_t ldc) {
    constexpr std::size_t kDepthBlock = 256;
    constexpr std::size_t kColBlock = 512;
    const std::size_t m4 = m - m % 4;
    const std::size_t n8 = n - n % 8;
    for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
        const std::size_t p1 = std::min(k, p0 + kDepthBlock);
        for (std::size_t j0 = 0; j0 < n8; j0 += kColBlock) {
            const std::size_t j1 = std::min(n8, j0 + kColBlock);
            for (std::size_t i = 0; i < m4; i += 4) {
                for (std::size_t j = j0; j < j1; j += 8) {
                    micro_4x8(p1 - p0, a + i * lda + p0, lda, b + p0 * ldb + j, ldb, c + i * ldc + j, ldc);
                }
            }
        }
        gemm_edge(0, m4, n8, n, p0, p1, a, lda, b, ldb, c, ldc);
        gemm_edge(m4, m, 0, n, p0, p1, a, lda, b, ldb, c, ldc);
    }
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
    constexpr std::size_t kTile = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
        for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
            const std::size_t r1 = std::min(rows, r0 + kTile);
            const std::size_t c1 = std::min(cols, c0 + kTile);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
    }
}

}  // namespace jemb::kernels
