#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "jemb/error.hpp"
#include "jemb/training.hpp"

using namespace jemb;

namespace {

TrainConfig tiny_config() {
    TrainConfig c = desk_config();
    c.model.input_size = 16;
    c.model.conv_blocks = 2;
    c.model.base_channels = 4;
    c.model.latent_dim = 4;
    c.batch_size = 8;
    c.max_epochs = 3;
    c.patience = 5;
    c.seed = 11;
    return c;
}

const std::vector<MultimodalSample>& tiny_data() {
    static const auto ds = generate_dataset(40, 4, 4, 16, 5);
    return ds;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::string checkpoint_bytes(const ModelParams& p) {
    std::stringstream s;
    write_checkpoint(s, p);
    return s.str();
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor w({3}, {1.0, -2.0, 0.5});
    w.set_requires_grad(true);
    w.grad_buffer();
    const std::vector<NamedTensor> params{{"w", w}};
    AdamState s;
    adam_step(params, s, 0.1, 0.0);
    EXPECT_EQ(values(w), (std::vector<double>{1.0, -2.0, 0.5}));
    EXPECT_EQ(s.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Tensor w({1}, {0.3});
    w.set_requires_grad(true);
    w.grad_buffer()[0] = 1.0;
    const std::vector<NamedTensor> params{{"w", w}};
    AdamState s;
    adam_step(params, s, 0.01, 0.0);
    // m_hat = 1, v_hat = 1 after bias correction.
    EXPECT_NEAR(w[0], 0.3 - 0.01 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, QuadraticMagnitudeDecreasesFromStepTwo) {
    // Scalar oracle run of Adam on f = theta^2 from theta = 1.
    Tensor w({1}, {1.0});
    w.set_requires_grad(true);
    const std::vector<NamedTensor> params{{"w", w}};
    AdamState s;
    std::vector<double> trace{1.0};
    double m = 0, v = 0, theta = 1.0;
    for (int step = 1; step <= 10; ++step) {
        w.zero_grad();
        backward(ops::sum(ops::square(w)));
        adam_step(params, s, 0.1, 0.0);
        const double g = 2 * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        theta -= 0.1 * (m / (1 - std::pow(0.9, step))) / (std::sqrt(v / (1 - std::pow(0.999, step))) + 1e-8);
        EXPECT_NEAR(w[0], theta, 1e-12);
        trace.push_back(std::abs(w[0]));
    }
    for (std::size_t k = 2; k < trace.size(); ++k) EXPECT_LT(trace[k], trace[k - 1]) << k;
}

TEST(Adam, DecoupledDecaySkipsNormAndTable) {
    Tensor w({1}, {2.0}), g({1}, {2.0}), t({1}, {2.0});
    for (Tensor* p : {&w, &g, &t}) {
        p->set_requires_grad(true);
        p->grad_buffer();
    }
    const std::vector<NamedTensor> params{{"enc.block0.weight", w}, {"enc.block0.gamma", g}, {"appearance_table", t}};
    AdamState s;
    adam_step(params, s, 0.1, 0.5);
    EXPECT_DOUBLE_EQ(w[0], 2.0 * (1 - 0.05));
    EXPECT_EQ(g[0], 2.0);
    EXPECT_EQ(t[0], 2.0);
}

TEST(Adam, MissingGradientNamesParameter) {
    Tensor w({2}, 1.0);
    w.set_requires_grad(true);
    const std::vector<NamedTensor> params{{"decoder.proj.weight", w}};
    AdamState s;
    try {
        adam_step(params, s, 0.1, 0.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("decoder.proj.weight"), std::string::npos);
    }
}

TEST(Schedule, StepDecay) {
    const TrainConfig c = full_config();
    EXPECT_EQ(lr_at(0, c), 0.0012);
    EXPECT_EQ(lr_at(49, c), 0.0012);
    EXPECT_NEAR(lr_at(50, c), 0.00096, 1e-18);
    EXPECT_NEAR(lr_at(100, c), 0.0012 * 0.64, 1e-18);
}

TEST(Config, FullPresetValues) {
    const TrainConfig c = full_config();
    EXPECT_EQ(c.loss.lambda_con, 0.02);
    EXPECT_EQ(c.loss.lambda_anti, 0.0005);
    EXPECT_EQ(c.loss.lambda_kl, 5e-5);
    EXPECT_EQ(c.loss.tau, 0.1);
    EXPECT_EQ(c.initial_lr, 0.0012);
    EXPECT_EQ(c.lr_decay_factor, 0.8);
    EXPECT_EQ(c.lr_decay_every_epochs, 50u);
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_EQ(c.model.latent_dim, 128u);
    EXPECT_EQ(c.patience, 5u);
    EXPECT_EQ(c.weight_decay, 1e-5);
}

TEST(Config, JsonRoundTripAndStrictness) {
    TrainConfig c = tiny_config();
    c.mode = TrainMode::ablation_no_contrastive;
    EXPECT_EQ(train_config_from_json(to_json(c)), c);
    EXPECT_EQ(train_config_from_json({{"preset", "full"}}), full_config());
    try {
        train_config_from_json({{"lamda_con", 0.1}});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("$.lamda_con"), std::string::npos);
    }
    EXPECT_THROW(train_config_from_json({{"batch_size", "32"}}), ConfigError);
    EXPECT_THROW(train_config_from_json({{"batch_size", 1}}), ConfigError);
    EXPECT_THROW(train_config_from_json({{"patience", 0}}), ConfigError);
    EXPECT_THROW(train_config_from_json({{"mode", "fancy"}}), ConfigError);
    EXPECT_THROW(train_config_from_json({{"tau", 0.0}}), ConfigError);
}

TEST(Config, AblationZeroesContrastiveTerms) {
    TrainConfig c = desk_config();
    c.mode = TrainMode::ablation_no_contrastive;
    const LossWeights w = c.effective_weights();
    EXPECT_EQ(w.lambda_con, 0.0);
    EXPECT_EQ(w.lambda_anti, 0.0);
    EXPECT_EQ(w.lambda_kl, c.loss.lambda_kl);
}

TEST(TrainEpoch, OneReportPerFullBatch) {
    TrainConfig c = tiny_config();
    c.batch_size = 16;
    Rng init(1);
    ModelParams p = init_params(c.model, 0, init);
    AdamState opt;
    Rng rng(2);
    EXPECT_EQ(train_epoch(p, opt, tiny_data(), c, 0, rng).size(), 2u);  // 40 samples, tail of 8 dropped
    c.batch_size = 41;
    EXPECT_THROW(train_epoch(p, opt, tiny_data(), c, 0, rng), ConfigError);
}

TEST(TrainEpoch, ReportTotalsAreConsistent) {
    TrainConfig c = tiny_config();
    Rng init(1);
    ModelParams p = init_params(c.model, 0, init);
    AdamState opt;
    Rng rng(3);
    const LossWeights w = c.effective_weights();
    for (const auto& r : train_epoch(p, opt, tiny_data(), c, 0, rng)) {
        EXPECT_NEAR(r.total, r.rec + w.lambda_con * r.con + w.lambda_anti * r.anti + w.lambda_kl * r.kl, 1e-12);
    }
}

TEST(TrainEpoch, ZeroWeightsFollowPlainVaeTrajectory) {
    TrainConfig c = tiny_config();
    c.loss = LossWeights{0.0, 0.0, 0.0, 0.1};
    Rng i1(4), i2(4);
    ModelParams a = init_params(c.model, 0, i1);
    ModelParams b = init_params(c.model, 0, i2);
    AdamState oa, ob;
    Rng ra(5), rb(5);
    train_epoch(a, oa, tiny_data(), c, 0, ra);

    // Reference loop: reconstruction objective only, same sampling order.
    std::vector<std::size_t> order(tiny_data().size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rb.engine());
    const auto trainable = trainable_parameters(b, TrainMode::joint);
    for (std::size_t start = 0; start + c.batch_size <= order.size(); start += c.batch_size) {
        const std::span<const std::size_t> idx(order.data() + start, c.batch_size);
        const Tensor x = stack_rgb(tiny_data(), idx);
        const Tensor d = stack_depth(tiny_data(), idx);
        for (const auto& [n, t] : trainable) Tensor(t).zero_grad();
        const auto ea = encoder_forward(b.appearance, x, Mode::train);
        const Tensor za = sample_latent(ea.mu, ea.logvar, rb, Mode::train);
        const auto es = encoder_forward(b.structure_rgb, x, Mode::train);
        const Tensor zs = sample_latent(es.mu, es.logvar, rb, Mode::train);
        const auto eb = encoder_forward(b.structure_depth, d, Mode::train);
        sample_latent(eb.mu, eb.logvar, rb, Mode::train);
        backward(ops::add(recon_loss(x, decoder_forward(b.decoder, za, zs, Mode::train)),
                          ops::scale(ops::sum(eb.mu), 0.0)));
        adam_step(trainable, ob, lr_at(0, c), c.weight_decay);
    }
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) {
        if (pa[k].first.starts_with("structure_depth")) continue;
        EXPECT_EQ(values(pa[k].second), values(pb[k].second)) << pa[k].first;
    }
}

TEST(TrainEpoch, LookupRowsGetGradientOnlyFromTheirBatch) {
    TrainConfig c = tiny_config();
    c.mode = TrainMode::baseline_lookup;
    Rng init(6);
    ModelParams p = init_params(c.model, tiny_data().size(), init);
    const std::size_t rows[] = {3, 7, 11, 19, 23, 29, 31, 37};
    const Tensor x = stack_rgb(tiny_data(), rows);
    const Tensor d = stack_depth(tiny_data(), rows);
    Rng rng(7);
    backward(batch_loss(p, x, d, rows, c, rng).objective);
    const auto g = p.appearance_table.grad();
    const std::size_t dim = c.model.latent_dim;
    for (std::size_t r = 0; r < tiny_data().size(); ++r) {
        double norm = 0.0;
        for (std::size_t j = 0; j < dim; ++j) norm += g[r * dim + j] * g[r * dim + j];
        const bool in_batch = std::find(std::begin(rows), std::end(rows), r) != std::end(rows);
        if (in_batch) {
            EXPECT_GT(norm, 0.0) << r;
        } else {
            EXPECT_EQ(norm, 0.0) << r;
        }
    }
    EXPECT_FALSE(p.appearance.blocks[0].weight.has_grad());
}

TEST(TrainEpoch, NonFiniteLossAborts) {
    TrainConfig c = tiny_config();
    Rng init(8);
    ModelParams p = init_params(c.model, 0, init);
    for (double& v : p.decoder.proj_bias.mutable_data()) v = std::nan("");
    AdamState opt;
    Rng rng(9);
    try {
        train_epoch(p, opt, tiny_data(), c, 0, rng);
        FAIL();
    } catch (const TrainingAborted& e) {
        EXPECT_NE(std::string(e.what()).find("rec"), std::string::npos);
        EXPECT_TRUE(std::isnan(e.report().rec));
    }
}

TEST(Fit, ZeroEpochsReturnsInitialParameters) {
    TrainConfig c = tiny_config();
    c.max_epochs = 0;
    const FitResult r = fit(c, tiny_data(), tiny_data());
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.best_epoch, 0u);
    Rng init(c.seed);
    EXPECT_EQ(checkpoint_bytes(r.best), checkpoint_bytes(init_params(c.model, 0, init)));
}

TEST(Fit, PatienceOneStopsAtEpochThree) {
    TrainConfig c = tiny_config();
    c.max_epochs = 10;
    c.patience = 1;
    FitHooks hooks;
    const double losses[] = {5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0};
    hooks.validator = [&](ModelParams&, std::size_t epoch) { return losses[epoch - 1]; };
    const FitResult r = fit(c, tiny_data(), tiny_data(), hooks);
    EXPECT_EQ(r.history.size(), 3u);
    EXPECT_TRUE(r.stopped_early);
    EXPECT_EQ(r.best_epoch, 1u);

    // The returned parameters are those after epoch 1.
    TrainConfig one = c;
    one.max_epochs = 1;
    const FitResult r1 = fit(one, tiny_data(), tiny_data(), hooks);
    EXPECT_EQ(checkpoint_bytes(r.best), checkpoint_bytes(r1.best));
}

TEST(Fit, ImprovementNeedsMoreThanTolerance) {
    TrainConfig c = tiny_config();
    c.max_epochs = 6;
    c.patience = 1;
    FitHooks hooks;
    const double losses[] = {1.0, 1.0 - 5e-7, 1.0 - 9e-7, 0.5, 0.5, 0.5};
    hooks.validator = [&](ModelParams&, std::size_t epoch) { return losses[epoch - 1]; };
    const FitResult r = fit(c, tiny_data(), tiny_data(), hooks);
    EXPECT_EQ(r.history.size(), 3u);  // epochs 2 and 3 are ties
    EXPECT_EQ(r.best_epoch, 1u);
    EXPECT_TRUE(r.stopped_early);
}

TEST(Fit, StoppingIgnoresContrastiveWeight) {
    TrainConfig c = tiny_config();
    c.max_epochs = 8;
    c.patience = 2;
    const double losses[] = {4.0, 3.0, 3.5, 2.0, 2.5, 2.6, 2.7, 1.0};
    FitHooks hooks;
    hooks.validator = [&](ModelParams&, std::size_t epoch) { return losses[epoch - 1]; };
    const FitResult base = fit(c, tiny_data(), tiny_data(), hooks);
    c.loss.lambda_con = 50.0;
    const FitResult heavy = fit(c, tiny_data(), tiny_data(), hooks);
    EXPECT_EQ(base.history.size(), heavy.history.size());
    EXPECT_EQ(base.best_epoch, heavy.best_epoch);
    EXPECT_EQ(base.best_epoch, 4u);
}

TEST(Fit, DeterministicCheckpoints) {
    TrainConfig c = tiny_config();
    c.max_epochs = 2;
    const FitResult a = fit(c, tiny_data(), tiny_data());
    const FitResult b = fit(c, tiny_data(), tiny_data());
    EXPECT_EQ(checkpoint_bytes(a.best), checkpoint_bytes(b.best));
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t k = 0; k < a.history.size(); ++k) EXPECT_EQ(a.history[k].val_rec, b.history[k].val_rec);
}

TEST(Fit, BaselineModeTrains) {
    TrainConfig c = tiny_config();
    c.mode = TrainMode::baseline_lookup;
    c.max_epochs = 2;
    const FitResult r = fit(c, tiny_data(), tiny_data());
    EXPECT_TRUE(r.best.has_lookup());
    EXPECT_EQ(r.best.appearance_table.dim(0), tiny_data().size());
    EXPECT_EQ(r.history.size(), 2u);
}

TEST(Fit, RejectsSizeMismatch) {
    TrainConfig c = tiny_config();
    c.model.input_size = 32;
    c.model.conv_blocks = 3;
    EXPECT_THROW(fit(c, tiny_data(), tiny_data()), ConfigError);
}

TEST(History, CsvHasOneRowPerEpoch) {
    const auto path = std::filesystem::temp_directory_path() / "jemb_history_test.csv";
    std::vector<EpochRecord> h(3);
    for (std::size_t k = 0; k < 3; ++k) h[k].epoch = k + 1;
    write_history_csv(path.string(), h);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,lr,train_rec,train_con,train_anti,train_kl,train_total,val_rec");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 3);
}

TEST(Fit, BestValidationBeatsFirstEpoch) {
    TrainConfig c = tiny_config();
    c.max_epochs = 6;
    const auto data = generate_dataset(160, 2, 2, 16, 9);
    const std::span<const MultimodalSample> all(data);
    const FitResult r = fit(c, all.subspan(0, 128), all.subspan(128));
    ASSERT_GE(r.best_epoch, 1u);
    EXPECT_LT(r.history[r.best_epoch - 1].val_rec, r.history.front().val_rec);
}
