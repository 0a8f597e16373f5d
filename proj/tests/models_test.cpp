#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "jemb/error.hpp"
#include "jemb/models.hpp"

using namespace jemb;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.input_size = 16;
    c.conv_blocks = 2;
    c.base_channels = 4;
    c.latent_dim = 6;
    return c;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void zero(Tensor t) {
    for (double& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST(EncoderConfig, Validation) {
    EncoderConfig c = tiny_config();
    EXPECT_NO_THROW(c.validate());
    c.input_size = 18;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    c.latent_dim = 1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EncoderConfig, JsonRoundTrip) {
    const EncoderConfig c = tiny_config();
    EXPECT_EQ(encoder_config_from_json(to_json(c)), c);
}

TEST(Encoder, ZeroHeadsGiveZeroCodes) {
    Rng rng(1);
    ModelParams p = init_params(tiny_config(), 0, rng);
    zero(p.appearance.mu_weight);
    zero(p.appearance.logvar_weight);
    const Tensor x = rng.uniform_tensor({3, 3, 16, 16}, 0.0, 1.0);
    const auto out = encoder_forward(p.appearance, x, Mode::train);
    for (double v : out.mu.data()) EXPECT_EQ(v, 0.0);
    for (double v : out.logvar.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, EvalIsDeterministicAndRowwise) {
    Rng rng(2);
    ModelParams p = init_params(tiny_config(), 0, rng);
    Tensor x = rng.uniform_tensor({2, 3, 16, 16}, 0.0, 1.0);
    auto data = x.mutable_data();
    std::copy(data.begin(), data.begin() + 3 * 256, data.begin() + 3 * 256);
    const auto a = encoder_forward(p.structure_rgb, x, Mode::eval);
    const auto b = encoder_forward(p.structure_rgb, x, Mode::eval);
    EXPECT_EQ(values(a.mu), values(b.mu));
    EXPECT_EQ(values(a.logvar), values(b.logvar));
    ASSERT_EQ(a.mu.shape(), (Shape{2, 6}));
    for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_EQ(a.mu[j], a.mu[6 + j]);
        EXPECT_EQ(a.logvar[j], a.logvar[6 + j]);
    }
}

TEST(Encoder, OutputShapeIndependentOfBatch) {
    Rng rng(3);
    ModelParams p = init_params(tiny_config(), 0, rng);
    for (std::size_t batch : {1u, 2u, 5u}) {
        const auto out = encoder_forward(p.structure_depth, rng.uniform_tensor({batch, 1, 16, 16}, 0, 1), Mode::eval);
        EXPECT_EQ(out.mu.shape(), (Shape{batch, 6}));
        EXPECT_EQ(out.logvar.shape(), (Shape{batch, 6}));
    }
}

TEST(Encoder, RejectsWrongInput) {
    Rng rng(4);
    ModelParams p = init_params(tiny_config(), 0, rng);
    EXPECT_THROW(encoder_forward(p.appearance, Tensor({1, 1, 16, 16}), Mode::eval), ShapeError);
    EXPECT_THROW(encoder_forward(p.appearance, Tensor({1, 3, 16, 8}), Mode::eval), ShapeError);
}

TEST(Encoder, LogvarIsClamped) {
    Rng rng(5);
    ModelParams p = init_params(tiny_config(), 0, rng);
    for (double& v : p.appearance.logvar_bias.mutable_data()) v = 50.0;
    const auto out = encoder_forward(p.appearance, rng.uniform_tensor({2, 3, 16, 16}, 0, 1), Mode::eval);
    for (double v : out.logvar.data()) EXPECT_EQ(v, kLogvarMax);
}

TEST(SampleLatent, EvalReturnsMuExactly) {
    Rng rng(6);
    const Tensor mu = rng.normal_tensor({3, 4});
    const Tensor lv = rng.normal_tensor({3, 4});
    EXPECT_EQ(values(sample_latent(mu, lv, rng, Mode::eval)), values(mu));
}

TEST(SampleLatent, MinimumLogvarCollapsesNoise) {
    Rng rng(7);
    const Tensor mu = rng.normal_tensor({4, 4});
    const Tensor lv({4, 4}, kLogvarMin);
    Rng noise(8);
    const Tensor z = sample_latent(mu, lv, noise, Mode::train);
    Rng replay(8);
    for (std::size_t i = 0; i < mu.numel(); ++i) {
        const double eps = replay.normal();
        EXPECT_NEAR(z[i] - mu[i], std::exp(-5.0) * eps, 1e-15);
        EXPECT_LE(std::abs(z[i] - mu[i]), 6.8e-3 * std::abs(eps));
    }
}

TEST(SampleLatent, EmpiricalMeanWithinCltBound) {
    Rng rng(9);
    const Tensor mu({1, 3}, {0.5, -1.0, 2.0});
    const Tensor lv({1, 3}, {0.0, 1.0, -2.0});
    std::vector<double> mean(3, 0.0);
    constexpr int kSamples = 10000;
    for (int s = 0; s < kSamples; ++s) {
        const Tensor z = sample_latent(mu, lv, rng, Mode::train);
        for (std::size_t j = 0; j < 3; ++j) mean[j] += (z[j] - mu[j]) / kSamples;
    }
    for (std::size_t j = 0; j < 3; ++j) EXPECT_LT(std::abs(mean[j]), 3.0 * std::exp(0.5 * lv[j]) / 100.0);
}

TEST(SampleLatent, GradientReachesMuAndLogvar) {
    Rng rng(10);
    Tensor mu = rng.normal_tensor({2, 3});
    Tensor lv = rng.normal_tensor({2, 3});
    mu.set_requires_grad(true);
    lv.set_requires_grad(true);
    backward(ops::sum(sample_latent(mu, lv, rng, Mode::train)));
    for (double g : mu.grad()) EXPECT_EQ(g, 1.0);
    EXPECT_TRUE(lv.has_grad());
}

TEST(Decoder, OutputShapeRangeAndDeterminism) {
    Rng rng(11);
    ModelParams p = init_params(tiny_config(), 0, rng);
    const Tensor za = rng.normal_tensor({2, 6});
    const Tensor zs = rng.normal_tensor({2, 6});
    const Tensor a = decoder_forward(p.decoder, za, zs, Mode::eval);
    const Tensor b = decoder_forward(p.decoder, za, zs, Mode::eval);
    EXPECT_EQ(a.shape(), (Shape{2, 3, 16, 16}));
    EXPECT_EQ(values(a), values(b));
    for (double v : a.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Decoder, ConcatenationOrderMatters) {
    Rng rng(12);
    ModelParams p = init_params(tiny_config(), 0, rng);
    const Tensor za = rng.normal_tensor({2, 6});
    const Tensor zs = rng.normal_tensor({2, 6});
    EXPECT_NE(values(decoder_forward(p.decoder, za, zs, Mode::eval)),
              values(decoder_forward(p.decoder, zs, za, Mode::eval)));
}

TEST(Decoder, RejectsLatentMismatch) {
    Rng rng(13);
    ModelParams p = init_params(tiny_config(), 0, rng);
    EXPECT_THROW(decoder_forward(p.decoder, Tensor({2, 5}), Tensor({2, 6}), Mode::eval), ShapeError);
    EXPECT_THROW(decoder_forward(p.decoder, Tensor({2, 6}), Tensor({3, 6}), Mode::eval), ShapeError);
}

TEST(Model, ReconstructionGradientReachesAllEncoders) {
    Rng rng(14);
    ModelParams p = init_params(tiny_config(), 0, rng);
    const Tensor x = rng.uniform_tensor({4, 3, 16, 16}, 0, 1);
    const Tensor d = rng.uniform_tensor({4, 1, 16, 16}, 0, 1);
    const auto a = encoder_forward(p.appearance, x, Mode::train);
    const auto s = encoder_forward(p.structure_rgb, x, Mode::train);
    const auto b = encoder_forward(p.structure_depth, d, Mode::train);
    const Tensor xhat = decoder_forward(p.decoder, a.mu, s.mu, Mode::train);
    const Tensor loss = ops::add(ops::sum(ops::square(ops::sub(x, xhat))), ops::sum(ops::square(b.mu)));
    backward(loss);
    for (const auto* e : {&p.appearance, &p.structure_rgb, &p.structure_depth}) {
        double norm = 0.0;
        for (double g : e->blocks.front().weight.grad()) norm += g * g;
        EXPECT_GT(norm, 0.0);
    }
}

TEST(Init, SeededInitIsBitIdentical) {
    Rng r1(15), r2(15);
    const ModelParams a = init_params(tiny_config(), 5, r1);
    const ModelParams b = init_params(tiny_config(), 5, r2);
    const auto sa = a.state(), sb = b.state();
    ASSERT_EQ(sa.size(), sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        EXPECT_EQ(sa[i].first, sb[i].first);
        EXPECT_EQ(values(sa[i].second), values(sb[i].second));
    }
}

TEST(Init, BiasesZeroNormUnitAndGradFlags) {
    Rng rng(16);
    const ModelParams p = init_params(tiny_config(), 3, rng);
    for (const auto& [name, t] : p.parameters()) {
        EXPECT_TRUE(t.requires_grad()) << name;
        const bool is_bias = name.ends_with("bias") || name.ends_with("beta");
        if (is_bias) {
            for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
        }
        if (name.ends_with("gamma")) {
            for (double v : t.data()) EXPECT_EQ(v, 1.0) << name;
        }
    }
    for (const auto& [name, t] : p.buffers()) EXPECT_FALSE(t.requires_grad()) << name;
}

TEST(Init, HeNormalStdWithinTenPercent) {
    EncoderConfig c;  // desk default
    Rng rng(17);
    const ModelParams p = init_params(c, 0, rng);
    int checked = 0;
    for (const auto& [name, t] : p.parameters()) {
        if (!name.ends_with("weight") || t.rank() < 2) continue;
        const std::size_t fan_in = t.rank() == 4 ? (name.starts_with("decoder") ? t.dim(0) : t.dim(1)) * 9 : t.dim(1);
        const std::size_t fan_out = t.numel() / fan_in;
        if (fan_in * fan_out < 1000) continue;
        double sq = 0.0, mean = 0.0;
        for (double v : t.data()) mean += v / static_cast<double>(t.numel());
        for (double v : t.data()) sq += (v - mean) * (v - mean);
        const double sd = std::sqrt(sq / static_cast<double>(t.numel() - 1));
        EXPECT_NEAR(sd / std::sqrt(2.0 / static_cast<double>(fan_in)), 1.0, 0.1) << name;
        ++checked;
    }
    EXPECT_GE(checked, 10);
}

TEST(Lookup, FreshRowIsInitVector) {
    Rng rng(18);
    const ModelParams p = init_params(tiny_config(), 4, rng);
    const Tensor row = lookup_appearance(p, 0);
    ASSERT_EQ(row.shape(), (Shape{1, 6}));
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(row[j], p.appearance_table[j]);
}

TEST(Lookup, OneHotGradientAndIndependentRows) {
    Rng rng(19);
    const ModelParams p = init_params(tiny_config(), 4, rng);
    backward(ops::sum(lookup_appearance(p, 2)));
    const auto g = p.appearance_table.grad();
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(g[r * 6 + j], r == 2 ? 1.0 : 0.0);
}

TEST(Lookup, OutOfRangeThrows) {
    Rng rng(20);
    const ModelParams p = init_params(tiny_config(), 4, rng);
    EXPECT_THROW(lookup_appearance(p, 4), Error);
    const ModelParams none = init_params(tiny_config(), 0, rng);
    EXPECT_THROW(lookup_appearance(none, 0), Error);
}

TEST(Checkpoint, RoundTripPreservesEverything) {
    Rng rng(21);
    ModelParams p = init_params(tiny_config(), 3, rng);
    for (double& v : p.appearance.blocks[0].norm.running_var.mutable_data()) v = 2.5;
    std::stringstream buf;
    write_checkpoint(buf, p, {{"epoch", 7}});
    const Checkpoint ck = read_checkpoint(buf);
    EXPECT_EQ(ck.metadata.at("epoch"), 7);
    EXPECT_EQ(ck.params.config(), p.config());
    const auto a = p.state(), b = ck.params.state();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(values(a[i].second), values(b[i].second)) << a[i].first;
        EXPECT_EQ(a[i].second.requires_grad(), b[i].second.requires_grad());
    }
}

TEST(Checkpoint, CorruptionReportsOffset) {
    Rng rng(22);
    const ModelParams p = init_params(tiny_config(), 0, rng);
    std::stringstream buf;
    write_checkpoint(buf, p);
    std::string bytes = buf.str();
    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream s1(bad);
    try {
        read_checkpoint(s1);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    std::stringstream s2(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_checkpoint(s2), FormatError);
}
