#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "jemb/tensor.hpp"

// Differentiable primitives. Every function records a graph node on its result
// when any input requires grad. Elementwise binaries need identical shapes; the
// only broadcasting is tensor-with-scalar.
namespace jemb::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws DomainError on any non-positive element.
Tensor log(const Tensor& a);
/// Throws DomainError on any negative element. sqrt(0) is allowed in the
/// forward pass; its gradient is infinite.
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
/// Values are clipped to [lo, hi]; gradient passes only where lo < a < hi.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// (m,k) x (k,n) -> (m,n)
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (B,in), weight (out,in), bias (out) or undefined -> (B,out)
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Rowwise dot product: (B,d),(B,d) -> (B)
Tensor batched_dot(const Tensor& a, const Tensor& b);
/// Each row divided by its L2 norm. Throws DomainError on a zero row.
Tensor l2_normalize_rows(const Tensor& a);
/// out[i] = log sum_{j : mask[i*n+j] != 0} exp(a[i,j]) for a (m,n).
/// An empty mask selects every column. Uses max subtraction for stability.
/// Throws DomainError if a row selects nothing.
Tensor logsumexp_rows(const Tensor& a, std::span<const std::uint8_t> mask = {});

/// Rows of table (N,d) picked by index -> (k,d). Gradient scatters back.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

struct Conv2dGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// x (B,Cin,H,W), weight (Cout,Cin,K,K), bias (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom);

/// Adjoint of conv2d with the same weight layout (Cy,Cx,K,K): maps
/// y (B,Cy,Hy,Wy) to (B,Cx,H,W) with H = (Hy-1)*stride - 2*padding + K + output_padding.
Tensor conv_transpose2d(const Tensor& y, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom,
                        std::size_t output_padding = 0);

struct BatchNormState {
    Tensor running_mean;  // (C)
    Tensor running_var;   // (C)
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel normalization over (B,H,W) of x (B,C,H,W). In training mode
/// batch statistics are used and the running estimates are updated in place;
/// otherwise the running estimates are used.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    bool training);

}  // namespace jemb::ops
