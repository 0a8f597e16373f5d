#include "jemb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "jemb/error.hpp"
#include "kernels.hpp"

namespace jemb::ops {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
    if (a.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
    }
}

// Elementwise unary op given f(x) and df/dx expressed through (x, f(x)).
template <typename F, typename D>
Tensor unary(const char* name, const Tensor& a, F f, D df) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return Tensor::make_result(a.shape(), std::move(out), name, {a},
                               [a, df](std::span<const double> y, std::span<const double> gy) mutable {
                                   if (!a.requires_grad()) return;
                                   auto g = a.grad_buffer();
                                   const auto x = a.data();
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * df(x[i], y[i]);
                               });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return Tensor::make_result(a.shape(), std::move(out), "add", {a, b},
                               [a, b](std::span<const double>, std::span<const double> gy) mutable {
                                   for (const Tensor* t : {&a, &b}) {
                                       if (!t->requires_grad()) continue;
                                       auto g = t->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                                   }
                               });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b},
                               [a, b](std::span<const double>, std::span<const double> gy) mutable {
                                   if (a.requires_grad()) {
                                       auto g = a.grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                                   }
                                   if (b.requires_grad()) {
                                       auto g = b.grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
                                   }
                               });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b},
                               [a, b](std::span<const double>, std::span<const double> gy) mutable {
                                   if (a.requires_grad()) {
                                       auto g = a.grad_buffer();
                                       const auto y = b.data();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * y[i];
                                   }
                                   if (b.requires_grad()) {
                                       auto g = b.grad_buffer();
                                       const auto x = a.data();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * x[i];
                                   }
                               });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (y[i] == 0.0) throw DomainError("div: division by zero at element " + std::to_string(i));
        out[i] = x[i] / y[i];
    }
    return Tensor::make_result(a.shape(), std::move(out), "div", {a, b},
                               [a, b](std::span<const double> q, std::span<const double> gy) mutable {
                                   const auto y = b.data();
                                   if (a.requires_grad()) {
                                       auto g = a.grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] / y[i];
                                   }
                                   if (b.requires_grad()) {
                                       auto g = b.grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i] * q[i] / y[i];
                                   }
                               });
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return factor * x; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary("add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x <= 0.0 ? 0.0 : x; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    }
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v >= 0.0)) throw DomainError("sqrt: negative input " + std::to_string(v));
    }
    return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::make_result(std::move(shape), std::move(out), "reshape", {a},
                               [a](std::span<const double>, std::span<const double> gy) mutable {
                                   if (!a.requires_grad()) return;
                                   auto g = a.grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                               });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    }
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != first.size()) {
            throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
        }
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) {
                throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
            }
        }
        out_shape[axis] += s[axis];
    }
    // View every input as (outer, extent*inner) blocks laid side by side.
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t out_row = out_shape[axis] * inner;

    std::vector<double> out(outer * out_row);
    std::vector<std::size_t> offsets;
    std::size_t col = 0;
    for (const auto& p : parts) {
        offsets.push_back(col);
        const std::size_t w = p.dim(axis) * inner;
        const auto src = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * w), w, out.begin() + static_cast<std::ptrdiff_t>(o * out_row + col));
        col += w;
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return Tensor::make_result(
        out_shape, std::move(out), "concat", parents,
        [parents, offsets, outer, inner, out_row, axis](std::span<const double>,
                                                        std::span<const double> gy) mutable {
            for (std::size_t k = 0; k < parents.size(); ++k) {
                auto& p = parents[k];
                if (!p.requires_grad()) continue;
                auto g = p.grad_buffer();
                const std::size_t w = p.dim(axis) * inner;
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < w; ++i) g[o * w + i] += gy[o * out_row + offsets[k] + i];
            }
        });
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    const Tensor parts[] = {a, b};
    return concat(parts, axis);
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    kernels::transpose(r, c, a.data().data(), out.data());
    return Tensor::make_result({c, r}, std::move(out), "transpose", {a},
                               [a, r, c](std::span<const double>, std::span<const double> gy) mutable {
                                   if (!a.requires_grad()) return;
                                   auto g = a.grad_buffer();
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j) g[i * c + j] += gy[j * r + i];
                               });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::make_result({}, {s}, "sum", {a},
                               [a](std::span<const double>, std::span<const double> gy) mutable {
                                   if (!a.requires_grad()) return;
                                   for (double& g : a.grad_buffer()) g += gy[0];
                               });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::make_result({}, {s / n}, "mean", {a},
                               [a, n](std::span<const double>, std::span<const double> gy) mutable {
                                   if (!a.requires_grad()) return;
                                   for (double& g : a.grad_buffer()) g += gy[0] / n;
                               });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    kernels::gemm_acc(m, n, k, a.data().data(), k, b.data().data(), n, out.data(), n);
    return Tensor::make_result({m, n}, std::move(out), "matmul", {a, b},
                               [a, b, m, k, n](std::span<const double>, std::span<const double> gy) mutable {
                                   if (a.requires_grad()) {
                                       // dA = dY B^T
                                       std::vector<double> bt(n * k);
                                       kernels::transpose(k, n, b.data().data(), bt.data());
                                       kernels::gemm_acc(m, k, n, gy.data(), n, bt.data(), k,
                                                         a.grad_buffer().data(), k);
                                   }
                                   if (b.requires_grad()) {
                                       // dB = A^T dY
                                       std::vector<double> at(k * m);
                                       kernels::transpose(m, k, a.data().data(), at.data());
                                       kernels::gemm_acc(k, n, m, at.data(), m, gy.data(), n,
                                                         b.grad_buffer().data(), n);
                                   }
                               });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank("linear", x, 2);
    require_rank("linear", weight, 2);
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const bool has_bias = bias.defined() && bias.numel() > 0;
    if (has_bias && bias.shape() != Shape{out_dim}) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    std::vector<double> wt(in * out_dim);
    kernels::transpose(out_dim, in, weight.data().data(), wt.data());
    std::vector<double> out(batch * out_dim, 0.0);
    if (has_bias) {
        for (std::size_t i = 0; i < batch; ++i)
            std::copy(bias.data().begin(), bias.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * out_dim));
    }
    kernels::gemm_acc(batch, out_dim, in, x.data().data(), in, wt.data(), out_dim, out.data(), out_dim);

    std::vector<Tensor> parents{x, weight};
    if (has_bias) parents.push_back(bias);
    return Tensor::make_result(
        {batch, out_dim}, std::move(out), "linear", parents,
        [x, weight, bias, has_bias, batch, in, out_dim](std::span<const double>,
                                                        std::span<const double> gy) mutable {
            if (x.requires_grad()) {
                kernels::gemm_acc(batch, in, out_dim, gy.data(), out_dim, weight.data().data(), in,
                                  x.grad_buffer().data(), in);
            }
            if (weight.requires_grad()) {
                std::vector<double> gyt(out_dim * batch);
                kernels::transpose(batch, out_dim, gy.data(), gyt.data());
                kernels::gemm_acc(out_dim, in, batch, gyt.data(), batch, x.data().data(), in,
                                  weight.grad_buffer().data(), in);
            }
            if (has_bias && bias.requires_grad()) {
                auto g = bias.grad_buffer();
                for (std::size_t i = 0; i < batch; ++i)
                    for (std::size_t j = 0; j < out_dim; ++j) g[j] += gy[i * out_dim + j];
            }
        });
}

Tensor batched_dot(const Tensor& a, const Tensor& b) {
    require_rank("batched_dot", a, 2);
    require_same_shape("batched_dot", a, b);
    const std::size_t rows = a.dim(0), d = a.dim(1);
    const auto x = a.data(), y = b.data();
    std::vector<double> out(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i] += x[i * d + j] * y[i * d + j];
    return Tensor::make_result({rows}, std::move(out), "batched_dot", {a, b},
                               [a, b, rows, d](std::span<const double>, std::span<const double> gy) mutable {
                                   if (a.requires_grad()) {
                                       auto g = a.grad_buffer();
                                       const auto y = b.data();
                                       for (std::size_t i = 0; i < rows; ++i)
                                           for (std::size_t j = 0; j < d; ++j) g[i * d + j] += gy[i] * y[i * d + j];
                                   }
                                   if (b.requires_grad()) {
                                       auto g = b.grad_buffer();
                                       const auto x = a.data();
                                       for (std::size_t i = 0; i < rows; ++i)
                                           for (std::size_t j = 0; j < d; ++j) g[i * d + j] += gy[i] * x[i * d + j];
                                   }
                               });
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_rank("l2_normalize_rows", a, 2);
    const std::size_t rows = a.dim(0), d = a.dim(1);
    const auto x = a.data();
    std::vector<double> norms(rows);
    std::vector<double> out(rows * d);
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
        norms[i] = std::sqrt(s);
        if (norms[i] == 0.0) throw DomainError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / norms[i];
    }
    return Tensor::make_result(
        a.shape(), std::move(out), "l2_normalize_rows", {a},
        [a, norms, rows, d](std::span<const double> u, std::span<const double> gy) mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad_buffer();
            // d(x/|x|) applied to gy: (gy - u (u.gy)) / |x|
            for (std::size_t i = 0; i < rows; ++i) {
                double dotp = 0.0;
                for (std::size_t j = 0; j < d; ++j) dotp += u[i * d + j] * gy[i * d + j];
                for (std::size_t j = 0; j < d; ++j)
                    g[i * d + j] += (gy[i * d + j] - u[i * d + j] * dotp) / norms[i];
            }
        });
}

Tensor logsumexp_rows(const Tensor& a, std::span<const std::uint8_t> mask) {
    require_rank("logsumexp_rows", a, 2);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (!mask.empty() && mask.size() != rows * cols) {
        throw ShapeError("logsumexp_rows: mask of " + std::to_string(mask.size()) + " entries for input " +
                         shape_str(a.shape()));
    }
    std::vector<std::uint8_t> keep(mask.begin(), mask.end());
    if (keep.empty()) keep.assign(rows * cols, 1);
    const auto x = a.data();
    std::vector<double> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cols; ++j)
            if (keep[i * cols + j]) mx = std::max(mx, x[i * cols + j]);
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw DomainError("logsumexp_rows: row " + std::to_string(i) + " selects no entries");
        }
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j)
            if (keep[i * cols + j]) s += std::exp(x[i * cols + j] - mx);
        out[i] = mx + std::log(s);
    }
    return Tensor::make_result({rows}, std::move(out), "logsumexp_rows", {a},
                               [a, keep, rows, cols](std::span<const double> y, std::span<const double> gy) mutable {
                                   if (!a.requires_grad()) return;
                                   auto g = a.grad_buffer();
                                   const auto x = a.data();
                                   for (std::size_t i = 0; i < rows; ++i)
                                       for (std::size_t j = 0; j < cols; ++j)
                                           if (keep[i * cols + j])
                                               g[i * cols + j] += gy[i] * std::exp(x[i * cols + j] - y[i]);
                               });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
    require_rank("gather_rows", table, 2);
    const std::size_t n = table.dim(0), d = table.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(idx.size() * d);
    const auto src = table.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n) {
            throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                             std::to_string(n) + " rows");
        }
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return Tensor::make_result({idx.size(), d}, std::move(out), "gather_rows", {table},
                               [table, idx, d](std::span<const double>, std::span<const double> gy) mutable {
                                   if (!table.requires_grad()) return;
                                   auto g = table.grad_buffer();
                                   for (std::size_t r = 0; r < idx.size(); ++r)
                                       for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += gy[r * d + j];
                               });
}

}  // namespace jemb::ops
