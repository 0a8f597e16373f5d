#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "jemb/error.hpp"
#include "jemb/gradcheck.hpp"
#include "jemb/ops.hpp"
#include "jemb/rng.hpp"
#include "op_cases.hpp"

using namespace jemb;

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.requires_grad());
}

TEST(Tensor, NoGradTensorNeverAllocatesGrad) {
    Tensor a({3}, 1.0);
    Tensor b({3}, 2.0);
    b.set_requires_grad(true);
    backward(ops::sum(ops::mul(a, b)));
    EXPECT_FALSE(a.has_grad());
    EXPECT_TRUE(b.has_grad());
}

TEST(Ops, ConcatAlongAxisZero) {
    const Tensor out = ops::concat(Tensor({2}, {1, 2}), Tensor({1}, {3}), 0);
    EXPECT_EQ(out.shape(), (Shape{3}));
    EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 3}));
}

TEST(Ops, ConcatAlongColumns) {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor b({2, 1}, {5, 6});
    const Tensor out = ops::concat(a, b, 1);
    EXPECT_EQ(out.shape(), (Shape{2, 3}));
    EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 5, 3, 4, 6}));
}

TEST(Ops, Relu) {
    const Tensor out = ops::relu(Tensor({3}, {-1, 0, 2}));
    EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, IdentityKernelConvolutionIsIdentity) {
    Rng rng(3);
    const Tensor img = rng.uniform_tensor({2, 1, 6, 7}, 0.0, 1.0);
    Tensor kernel({1, 1, 3, 3}, 0.0);
    kernel.mutable_data()[4] = 1.0;
    const Tensor out = ops::conv2d(img, kernel, Tensor(), {.stride = 1, .padding = 1});
    ASSERT_EQ(out.shape(), img.shape());
    for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], img[i]);
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
    try {
        ops::add(Tensor({2, 3}), Tensor({3, 2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[3,2]"), std::string::npos);
    }
    EXPECT_THROW(ops::matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
    EXPECT_THROW(ops::conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor(), {}), ShapeError);
    EXPECT_THROW(ops::conv2d(Tensor({2, 4, 4}), Tensor({1, 2, 3, 3}), Tensor(), {}), ShapeError);
}

TEST(Ops, DomainErrors) {
    EXPECT_THROW(ops::log(Tensor({2}, {1.0, 0.0})), DomainError);
    EXPECT_THROW(ops::log(Tensor({1}, {-3.0})), DomainError);
    EXPECT_THROW(ops::sqrt(Tensor({1}, {-1e-3})), DomainError);
    EXPECT_THROW(ops::l2_normalize_rows(Tensor({2, 2}, {1, 0, 0, 0})), DomainError);
    const std::vector<std::uint8_t> nothing(4, 0);
    EXPECT_THROW(ops::logsumexp_rows(Tensor({2, 2}), nothing), DomainError);
}

TEST(Ops, LogSumExpIsStableForLargeLogits) {
    // exp(1000) overflows; max subtraction keeps the result finite.
    const Tensor out = ops::logsumexp_rows(Tensor({1, 2}, {1000.0, 1000.0}));
    EXPECT_NEAR(out[0], 1000.0 + std::log(2.0), 1e-9);
}

TEST(Backward, SumGivesOnes) {
    Rng rng(1);
    Tensor x = rng.normal_tensor({2, 3, 2});
    x.set_requires_grad(true);
    backward(ops::sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
    Tensor x({1}, {3.0});
    x.set_requires_grad(true);
    backward(ops::sum(ops::mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RejectsNonScalar) {
    Tensor x({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    EXPECT_THROW(backward(ops::scale(x, 2.0)), ShapeError);
}

TEST(Backward, RejectsLossWithoutGraph) { EXPECT_THROW(backward(ops::sum(Tensor({2}, 1.0))), Error); }

TEST(Backward, SharedSubexpressionAccumulates) {
    Tensor x({2}, {1.0, -2.0});
    x.set_requires_grad(true);
    const Tensor y = ops::square(x);
    backward(ops::sum(ops::add(y, ops::scale(y, 3.0))));  // 4 x^2
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -16.0);
}

TEST(Backward, TwiceWithoutZeroingDoublesGrads) {
    Rng rng(11);
    Tensor w = rng.normal_tensor({3, 2, 3, 3});
    w.set_requires_grad(true);
    Tensor x = rng.normal_tensor({2, 2, 5, 5});
    x.set_requires_grad(true);
    const Tensor h = ops::relu(ops::conv2d(x, w, Tensor(), {.stride = 2, .padding = 1}));
    const Tensor loss = ops::sum(ops::square(ops::l2_normalize_rows(ops::reshape(h, {2, h.numel() / 2}))));
    const Tensor loss2 = ops::add(loss, ops::sum(ops::exp(ops::scale(h, 0.1))));
    backward(loss2);
    const std::vector<double> once_w(w.grad().begin(), w.grad().end());
    const std::vector<double> once_x(x.grad().begin(), x.grad().end());
    backward(loss2);
    for (std::size_t i = 0; i < once_w.size(); ++i) EXPECT_EQ(w.grad()[i], 2.0 * once_w[i]);
    for (std::size_t i = 0; i < once_x.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * once_x[i]);
}

TEST(GradCheck, SumOfSquaresIsAccurate) {
    const auto f = [](const Tensor& x) { return ops::sum(ops::square(x)); };
    EXPECT_LT(finite_difference_check(f, Tensor({3}, {1.0, 2.0, 3.0}), 1e-5), 1e-6);
}

TEST(GradCheck, LinearFunctionIsExact) {
    Rng rng(5);
    const auto f = [](const Tensor& x) { return ops::sum(x); };
    EXPECT_LT(finite_difference_check(f, rng.normal_tensor({4, 3}), 1e-5), 1e-10);
}

TEST(GradCheck, DetectsAWrongGradient) {
    // A deliberately broken op: forward x^2, backward claims 3x.
    const auto broken = [](const Tensor& x) {
        std::vector<double> out;
        for (double v : x.data()) out.push_back(v * v);
        Tensor xc = x;
        const Tensor y = Tensor::make_result(x.shape(), out, "broken", {x},
                                             [xc](std::span<const double>, std::span<const double> gy) mutable {
                                                 auto g = xc.grad_buffer();
                                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * xc[i] * gy[i];
                                             });
        return ops::sum(y);
    };
    EXPECT_GT(finite_difference_check(broken, Tensor({2}, {1.0, 2.0}), 1e-5), 0.1);
}

TEST(GradCheck, EveryForwardOpAtTenRandomInputs) {
    for (const auto& c : testing_support::op_cases()) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(1000 + seed);
            const auto problem = c.make(rng);
            const double err = finite_difference_check(problem.f, problem.x, 1e-5);
            EXPECT_LT(err, 1e-4) << c.name << " seed " << seed;
        }
    }
}

TEST(Conv, TransposeIsAdjointOfConv) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t b = 1 + rng.index(3), cin = 1 + rng.index(3), cout = 1 + rng.index(4);
        const std::size_t k = 1 + 2 * rng.index(2), stride = 1 + rng.index(2), pad = rng.index(2);
        const std::size_t h = 4 + rng.index(5), w = h;
        const Tensor x = rng.normal_tensor({b, cin, h, w});
        const Tensor kernel = rng.normal_tensor({cout, cin, k, k});
        const Tensor cx = ops::conv2d(x, kernel, Tensor(), {stride, pad});
        const Tensor y = rng.normal_tensor(cx.shape());
        // Pick output_padding so the transpose lands back on x's shape.
        const std::size_t natural = (cx.dim(2) - 1) * stride + k - 2 * pad;
        const Tensor ty = ops::conv_transpose2d(y, kernel, Tensor(), {stride, pad}, h - natural);
        ASSERT_EQ(ty.shape(), x.shape()) << "seed " << seed;
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx[i] * y[i];
        for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
        EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs))) << "seed " << seed;
    }
}

TEST(Conv, TransposeDoublesSpatialSize) {
    const Tensor y({2, 4, 3, 3}, 1.0);
    const Tensor w({4, 5, 3, 3}, 0.5);
    EXPECT_EQ(ops::conv_transpose2d(y, w, Tensor(), {2, 1}, 1).shape(), (Shape{2, 5, 6, 6}));
}

TEST(BatchNorm, TrainingNormalizesAndUpdatesRunningStats) {
    Rng rng(2);
    const Tensor x = rng.normal_tensor({4, 2, 3, 3}, 3.0);
    ops::BatchNormState state{Tensor({2}, 0.0), Tensor({2}, 1.0)};
    const Tensor y = ops::batch_norm2d(x, Tensor({2}, 1.0), Tensor({2}, 0.0), state, true);
    for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0, ss = 0.0;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t q = 0; q < 9; ++q) {
                const double v = y[(b * 2 + c) * 9 + q];
                s += v;
                ss += v * v;
            }
        EXPECT_NEAR(s / 36.0, 0.0, 1e-12);
        EXPECT_NEAR(ss / 36.0, 1.0, 1e-4);
        EXPECT_NE(state.running_mean[c], 0.0);
    }
    // Eval mode ignores batch statistics: a single image gives a finite result.
    const Tensor single = rng.normal_tensor({1, 2, 1, 1});
    EXPECT_NO_THROW(ops::batch_norm2d(single, Tensor({2}, 1.0), Tensor({2}, 0.0), state, false));
}

TEST(Serialization, RoundTripIsBitExact) {
    Rng rng(9);
    const Tensor t = rng.normal_tensor({2, 3, 4});
    std::stringstream buf;
    write_tensor(buf, t);
    EXPECT_EQ(buf.str().size(), tensor_byte_size(t));
    EXPECT_EQ(buf.str().substr(0, 4), "TSR1");
    const Tensor back = read_tensor(buf);
    EXPECT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back[i], t[i]);
}

TEST(Serialization, LayoutMatchesFormat) {
    std::stringstream buf;
    write_tensor(buf, Tensor({2}, {1.0, -2.0}));
    const std::string s = buf.str();
    ASSERT_EQ(s.size(), 4u + 4u + 4u + 16u);
    EXPECT_EQ(static_cast<unsigned char>(s[4]), 1);  // rank, little-endian
    EXPECT_EQ(static_cast<unsigned char>(s[8]), 2);  // extent
    double v = 0.0;
    std::memcpy(&v, s.data() + 20, 8);
    EXPECT_EQ(v, -2.0);
}

TEST(Serialization, CorruptInputReportsOffset) {
    std::stringstream bad("TSRX\x01\x00\x00\x00");
    try {
        read_tensor(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    std::stringstream full;
    write_tensor(full, Tensor({4}, 1.0));
    std::stringstream truncated(full.str().substr(0, 20));
    try {
        read_tensor(truncated);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 12u);
    }
}
