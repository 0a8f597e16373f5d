#pragma once

#include <cstddef>

// Dense kernels shared by matmul, linear and the convolutions.
namespace jemb::kernels {

/// C(MxN) += A(MxK) * B(KxN); all row-major with the given leading dimensions.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
              const double* b, std::size_t ldb, double* c, std::size_t ldc);

/// dst(cols x rows) = src(rows x cols)^T
void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst);

}  // namespace jemb::kernels
