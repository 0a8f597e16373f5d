#include <cmath>
#include <string>

#include "jemb/error.hpp"
#include "jemb/ops.hpp"
#include "kernels.hpp"

namespace jemb::ops {

namespace {

struct Geometry {
    std::size_t batch, channels, height, width;  // image side
    std::size_t kernel, stride, padding;
    std::size_t out_h, out_w;                     // convolution-output side

    std::size_t col_rows() const { return channels * kernel * kernel; }
    std::size_t col_cols() const { return batch * out_h * out_w; }
};

// Unfolds image patches: col(C*K*K, B*OH*OW).
void im2col(const Geometry& g, const double* x, double* col) {
    const std::size_t plane = g.out_h * g.out_w;
    const std::size_t ncols = g.col_cols();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                double* row = col + ((c * g.kernel + kh) * g.kernel + kw) * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    const double* img = x + (b * g.channels + c) * g.height * g.width;
                    double* dst = row + b * plane;
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
                        if (ih < 0 || ih >= static_cast<long>(g.height)) {
                            for (std::size_t ow = 0; ow < g.out_w; ++ow) dst[oh * g.out_w + ow] = 0.0;
                            continue;
                        }
                        const double* src = img + static_cast<std::size_t>(ih) * g.width;
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
                            dst[oh * g.out_w + ow] =
                                (iw < 0 || iw >= static_cast<long>(g.width)) ? 0.0 : src[iw];
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters patch columns back, accumulating into x.
void col2im(const Geometry& g, const double* col, double* x) {
    const std::size_t plane = g.out_h * g.out_w;
    const std::size_t ncols = g.col_cols();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const double* row = col + ((c * g.kernel + kh) * g.kernel + kw) * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    double* img = x + (b * g.channels + c) * g.height * g.width;
                    const double* src = row + b * plane;
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
                        if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                        double* dst = img + static_cast<std::size_t>(ih) * g.width;
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
                            if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

// (B, C, P) <-> (C, B*P)
std::vector<double> to_channel_major(const double* x, std::size_t batch, std::size_t channels, std::size_t plane) {
    std::vector<double> out(batch * channels * plane);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t q = 0; q < plane; ++q)
                out[c * batch * plane + b * plane + q] = x[(b * channels + c) * plane + q];
    return out;
}

void add_from_channel_major(const double* cm, std::size_t batch, std::size_t channels, std::size_t plane,
                            double* x) {
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t q = 0; q < plane; ++q)
                x[(b * channels + c) * plane + q] += cm[c * batch * plane + b * plane + q];
}

void accumulate_channel_sums(std::span<const double> gy, std::size_t batch, std::size_t channels,
                             std::size_t plane, std::span<double> out) {
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
            double s = 0.0;
            const double* p = gy.data() + (b * channels + c) * plane;
            for (std::size_t q = 0; q < plane; ++q) s += p[q];
            out[c] += s;
        }
}

void check_kernel(const char* op, const Tensor& weight) {
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) == 0) {
        throw ShapeError(std::string(op) + ": weight must be (Cout,Cin,K,K), got " + shape_str(weight.shape()));
    }
}

bool check_bias(const char* op, const Tensor& bias, std::size_t channels) {
    if (!bias.defined() || bias.numel() == 0) return false;
    if (bias.shape() != Shape{channels}) {
        throw ShapeError(std::string(op) + ": bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(channels) + " channels");
    }
    return true;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be rank 4 (B,C,H,W), got " + shape_str(x.shape()));
    check_kernel("conv2d", weight);
    if (geom.stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (weight.dim(1) != x.dim(1)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t k = weight.dim(2);
    if (x.dim(2) + 2 * geom.padding < k || x.dim(3) + 2 * geom.padding < k) {
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
    }
    const std::size_t cout = weight.dim(0);
    const bool has_bias = check_bias("conv2d", bias, cout);

    Geometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, geom.stride, geom.padding, 0, 0};
    g.out_h = (g.height + 2 * g.padding - k) / g.stride + 1;
    g.out_w = (g.width + 2 * g.padding - k) / g.stride + 1;
    const std::size_t plane = g.out_h * g.out_w;
    const std::size_t kk = g.col_rows(), n = g.col_cols();

    std::vector<double> col(kk * n);
    im2col(g, x.data().data(), col.data());
    std::vector<double> out_cm(cout * n, 0.0);
    kernels::gemm_acc(cout, n, kk, weight.data().data(), kk, col.data(), n, out_cm.data(), n);

    std::vector<double> out(g.batch * cout * plane);
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t c = 0; c < cout; ++c) {
            const double bv = has_bias ? bias.data()[c] : 0.0;
            for (std::size_t q = 0; q < plane; ++q)
                out[(b * cout + c) * plane + q] = out_cm[c * n + b * plane + q] + bv;
        }

    std::vector<Tensor> parents{x, weight};
    if (has_bias) parents.push_back(bias);
    return Tensor::make_result(
        {g.batch, cout, g.out_h, g.out_w}, std::move(out), "conv2d", parents,
        [x, weight, bias, has_bias, g, cout, col = std::move(col)](std::span<const double>,
                                                                  std::span<const double> gy) mutable {
            const std::size_t plane = g.out_h * g.out_w;
            const std::size_t kk = g.col_rows(), n = g.col_cols();
            const auto gy_cm = to_channel_major(gy.data(), g.batch, cout, plane);
            if (weight.requires_grad()) {
                std::vector<double> col_t(n * kk);
                kernels::transpose(kk, n, col.data(), col_t.data());
                kernels::gemm_acc(cout, kk, n, gy_cm.data(), n, col_t.data(), kk, weight.grad_buffer().data(), kk);
            }
            if (has_bias && bias.requires_grad()) accumulate_channel_sums(gy, g.batch, cout, plane, bias.grad_buffer());
            if (x.requires_grad()) {
                std::vector<double> w_t(kk * cout);
                kernels::transpose(cout, kk, weight.data().data(), w_t.data());
                std::vector<double> dcol(kk * n, 0.0);
                kernels::gemm_acc(kk, n, cout, w_t.data(), cout, gy_cm.data(), n, dcol.data(), n);
                col2im(g, dcol.data(), x.grad_buffer().data());
            }
        });
}

Tensor conv_transpose2d(const Tensor& y, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom,
                        std::size_t output_padding) {
    if (y.rank() != 4) {
        throw ShapeError("conv_transpose2d: input must be rank 4 (B,C,H,W), got " + shape_str(y.shape()));
    }
    check_kernel("conv_transpose2d", weight);
    if (geom.stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
    if (weight.dim(0) != y.dim(1)) {
        throw ShapeError("conv_transpose2d: input " + shape_str(y.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    if (output_padding >= geom.stride) throw ShapeError("conv_transpose2d: output_padding must be < stride");
    const std::size_t k = weight.dim(2);
    const std::size_t cy = y.dim(1), cx = weight.dim(1);
    const std::size_t hy = y.dim(2), wy = y.dim(3);
    const long h = static_cast<long>((hy - 1) * geom.stride + k + output_padding) - 2 * static_cast<long>(geom.padding);
    const long w = static_cast<long>((wy - 1) * geom.stride + k + output_padding) - 2 * static_cast<long>(geom.padding);
    if (h <= 0 || w <= 0) throw ShapeError("conv_transpose2d: empty output for input " + shape_str(y.shape()));
    const bool has_bias = check_bias("conv_transpose2d", bias, cx);

    Geometry g{y.dim(0), cx, static_cast<std::size_t>(h), static_cast<std::size_t>(w), k, geom.stride, geom.padding,
               hy, wy};
    const std::size_t kk = g.col_rows(), n = g.col_cols();
    const std::size_t plane_y = hy * wy, plane_x = g.height * g.width;

    auto y_cm = to_channel_major(y.data().data(), g.batch, cy, plane_y);
    std::vector<double> w_t(kk * cy);
    kernels::transpose(cy, kk, weight.data().data(), w_t.data());
    std::vector<double> col(kk * n, 0.0);
    kernels::gemm_acc(kk, n, cy, w_t.data(), cy, y_cm.data(), n, col.data(), n);
    std::vector<double> out(g.batch * cx * plane_x, 0.0);
    col2im(g, col.data(), out.data());
    if (has_bias) {
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t c = 0; c < cx; ++c) {
                const double bv = bias.data()[c];
                for (std::size_t q = 0; q < plane_x; ++q) out[(b * cx + c) * plane_x + q] += bv;
            }
    }

    std::vector<Tensor> parents{y, weight};
    if (has_bias) parents.push_back(bias);
    return Tensor::make_result(
        {g.batch, cx, g.height, g.width}, std::move(out), "conv_transpose2d", parents,
        [y, weight, bias, has_bias, g, cy, y_cm = std::move(y_cm)](std::span<const double>,
                                                                  std::span<const double> gout) mutable {
            const std::size_t kk = g.col_rows(), n = g.col_cols();
            const std::size_t plane_y = g.out_h * g.out_w;
            std::vector<double> gcol(kk * n);
            im2col(g, gout.data(), gcol.data());
            if (y.requires_grad()) {
                std::vector<double> dy_cm(cy * n, 0.0);
                kernels::gemm_acc(cy, n, kk, weight.data().data(), kk, gcol.data(), n, dy_cm.data(), n);
                add_from_channel_major(dy_cm.data(), g.batch, cy, plane_y, y.grad_buffer().data());
            }
            if (weight.requires_grad()) {
                std::vector<double> gcol_t(n * kk);
                kernels::transpose(kk, n, gcol.data(), gcol_t.data());
                kernels::gemm_acc(cy, kk, n, y_cm.data(), n, gcol_t.data(), kk, weight.grad_buffer().data(), kk);
            }
            if (has_bias && bias.requires_grad()) {
                accumulate_channel_sums(gout, g.batch, g.channels, g.height * g.width, bias.grad_buffer());
            }
        });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    bool training) {
    if (x.rank() != 4) throw ShapeError("batch_norm2d: input must be rank 4, got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
        if (t->shape() != Shape{channels}) {
            throw ShapeError("batch_norm2d: per-channel tensor " + shape_str(t->shape()) + " does not match input " +
                             shape_str(x.shape()));
        }
    }
    const std::size_t count = batch * plane;
    if (training && count < 2) {
        throw ShapeError("batch_norm2d: training needs more than one value per channel, got " + shape_str(x.shape()));
    }
    const auto xv = x.data();
    std::vector<double> mean(channels), inv_std(channels);
    if (training) {
        auto rm = state.running_mean.mutable_data();
        auto rv = state.running_var.mutable_data();
        for (std::size_t c = 0; c < channels; ++c) {
            double s = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const double* p = xv.data() + (b * channels + c) * plane;
                for (std::size_t q = 0; q < plane; ++q) s += p[q];
            }
            const double mu = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const double* p = xv.data() + (b * channels + c) * plane;
                for (std::size_t q = 0; q < plane; ++q) ss += (p[q] - mu) * (p[q] - mu);
            }
            const double var = ss / static_cast<double>(count);
            mean[c] = mu;
            inv_std[c] = 1.0 / std::sqrt(var + state.eps);
            rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mu;
            rv[c] = (1.0 - state.momentum) * rv[c] +
                    state.momentum * ss / static_cast<double>(count - 1);
        }
    } else {
        for (std::size_t c = 0; c < channels; ++c) {
            mean[c] = state.running_mean.data()[c];
            inv_std[c] = 1.0 / std::sqrt(state.running_var.data()[c] + state.eps);
        }
    }

    std::vector<double> xhat(xv.size()), out(xv.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * plane;
            const double gm = gamma.data()[c], bt = beta.data()[c];
            for (std::size_t q = 0; q < plane; ++q) {
                xhat[base + q] = (xv[base + q] - mean[c]) * inv_std[c];
                out[base + q] = gm * xhat[base + q] + bt;
            }
        }

    return Tensor::make_result(
        x.shape(), std::move(out), "batch_norm2d", {x, gamma, beta},
        [x, gamma, beta, training, batch, channels, plane, inv_std, xhat = std::move(xhat)](
            std::span<const double>, std::span<const double> gy) mutable {
            const double count = static_cast<double>(batch * plane);
            std::vector<double> sum_gy(channels, 0.0), sum_gy_xhat(channels, 0.0);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (b * channels + c) * plane;
                    for (std::size_t q = 0; q < plane; ++q) {
                        sum_gy[c] += gy[base + q];
                        sum_gy_xhat[c] += gy[base + q] * xhat[base + q];
                    }
                }
            if (gamma.requires_grad()) {
                auto g = gamma.grad_buffer();
                for (std::size_t c = 0; c < channels; ++c) g[c] += sum_gy_xhat[c];
            }
            if (beta.requires_grad()) {
                auto g = beta.grad_buffer();
                for (std::size_t c = 0; c < channels; ++c) g[c] += sum_gy[c];
            }
            if (!x.requires_grad()) return;
            auto gx = x.grad_buffer();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (b * channels + c) * plane;
                    const double scale = gamma.data()[c] * inv_std[c];
                    if (training) {
                        const double m1 = sum_gy[c] / count, m2 = sum_gy_xhat[c] / count;
                        for (std::size_t q = 0; q < plane; ++q)
                            gx[base + q] += scale * (gy[base + q] - m1 - xhat[base + q] * m2);
                    } else {
                        for (std::size_t q = 0; q < plane; ++q) gx[base + q] += scale * gy[base + q];
                    }
                }
        });
}

}  // namespace jemb::ops
