#include "jemb/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <numeric>

#include "jemb/error.hpp"

namespace jemb {

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::joint:
            return "joint";
        case TrainMode::baseline_lookup:
            return "baseline";
        case TrainMode::ablation_no_contrastive:
            return "ablate-contrastive";
    }
    return "joint";
}

TrainMode parse_train_mode(const std::string& text) {
    if (text == "joint") return TrainMode::joint;
    if (text == "baseline") return TrainMode::baseline_lookup;
    if (text == "ablate-contrastive") return TrainMode::ablation_no_contrastive;
    throw ConfigError("unknown mode '" + text + "' (expected joint, baseline or ablate-contrastive)");
}

void TrainConfig::validate() const {
    model.validate();
    if (model.input_channels != 3) throw ConfigError("model.input_channels must be 3 (RGB)");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (!(initial_lr > 0.0)) throw ConfigError("initial_lr must be positive");
    if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be positive");
    if (lr_decay_every_epochs < 1) throw ConfigError("lr_decay_every_epochs must be at least 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    loss.validate();
}

LossWeights TrainConfig::effective_weights() const {
    LossWeights w = loss;
    if (mode == TrainMode::ablation_no_contrastive) {
        w.lambda_con = 0.0;
        w.lambda_anti = 0.0;
    }
    return w;
}

TrainConfig full_config() {
    TrainConfig c;
    c.model = {3, 128, 5, 32, 2, 128};
    c.batch_size = 64;
    c.initial_lr = 0.0012;
    c.lr_decay_factor = 0.8;
    c.lr_decay_every_epochs = 50;
    c.weight_decay = 1e-5;
    c.max_epochs = 400;
    c.patience = 5;
    c.loss = LossWeights{};
    return c;
}

TrainConfig desk_config() {
    TrainConfig c;
    c.model = EncoderConfig{};
    c.batch_size = 32;
    c.max_epochs = 70;
    c.patience = 10;
    c.loss.lambda_con = 1.0;
    c.loss.lambda_anti = 100.0;
    c.loss.lambda_kl = 1.0;
    c.loss.tau = 0.4;
    return c;
}

namespace {

const char* const kConfigKeys[] = {"preset",
                                   "input_channels",
                                   "input_size",
                                   "conv_blocks",
                                   "base_channels",
                                   "channel_growth",
                                   "latent_dim",
                                   "batch_size",
                                   "initial_lr",
                                   "lr_decay_factor",
                                   "lr_decay_every_epochs",
                                   "weight_decay",
                                   "max_epochs",
                                   "patience",
                                   "lambda_con",
                                   "lambda_anti",
                                   "lambda_kl",
                                   "tau",
                                   "include_positive_in_denominator",
                                   "seed",
                                   "mode"};

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& target) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    const std::string path = std::string("$.") + key;
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(path + ": expected a number");
    } else {
        if (!v.is_string()) throw ConfigError(path + ": expected a string");
    }
    target = v.get<T>();
}

}  // namespace

nlohmann::json to_json(const TrainConfig& c) {
    return {{"input_channels", c.model.input_channels},
            {"input_size", c.model.input_size},
            {"conv_blocks", c.model.conv_blocks},
            {"base_channels", c.model.base_channels},
            {"channel_growth", c.model.channel_growth},
            {"latent_dim", c.model.latent_dim},
            {"batch_size", c.batch_size},
            {"initial_lr", c.initial_lr},
            {"lr_decay_factor", c.lr_decay_factor},
            {"lr_decay_every_epochs", c.lr_decay_every_epochs},
            {"weight_decay", c.weight_decay},
            {"max_epochs", c.max_epochs},
            {"patience", c.patience},
            {"lambda_con", c.loss.lambda_con},
            {"lambda_anti", c.loss.lambda_anti},
            {"lambda_kl", c.loss.lambda_kl},
            {"tau", c.loss.tau},
            {"include_positive_in_denominator", c.loss.include_positive_in_denominator},
            {"seed", c.seed},
            {"mode", to_string(c.mode)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("$: config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(std::begin(kConfigKeys), std::end(kConfigKeys), key) == std::end(kConfigKeys)) {
            throw ConfigError("$." + key + ": unknown key");
        }
    }
    std::string preset = "desk";
    read_key(j, "preset", preset);
    TrainConfig c;
    if (preset == "desk") {
        c = desk_config();
    } else if (preset == "full") {
        c = full_config();
    } else {
        throw ConfigError("$.preset: unknown preset '" + preset + "' (expected desk or full)");
    }
    read_key(j, "input_channels", c.model.input_channels);
    read_key(j, "input_size", c.model.input_size);
    read_key(j, "conv_blocks", c.model.conv_blocks);
    read_key(j, "base_channels", c.model.base_channels);
    read_key(j, "channel_growth", c.model.channel_growth);
    read_key(j, "latent_dim", c.model.latent_dim);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "initial_lr", c.initial_lr);
    read_key(j, "lr_decay_factor", c.lr_decay_factor);
    read_key(j, "lr_decay_every_epochs", c.lr_decay_every_epochs);
    read_key(j, "weight_decay", c.weight_decay);
    read_key(j, "max_epochs", c.max_epochs);
    read_key(j, "patience", c.patience);
    read_key(j, "lambda_con", c.loss.lambda_con);
    read_key(j, "lambda_anti", c.loss.lambda_anti);
    read_key(j, "lambda_kl", c.loss.lambda_kl);
    read_key(j, "tau", c.loss.tau);
    read_key(j, "include_positive_in_denominator", c.loss.include_positive_in_denominator);
    read_key(j, "seed", c.seed);
    std::string mode = to_string(c.mode);
    read_key(j, "mode", mode);
    try {
        c.mode = parse_train_mode(mode);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("$.mode: ") + e.what());
    }
    c.validate();
    return c;
}

bool is_decayed(const std::string& name) {
    return !(name.ends_with(".gamma") || name.ends_with(".beta") || name == "appearance_table");
}

void adam_step(std::span<const NamedTensor> params, AdamState& state, double lr, double weight_decay) {
    if (state.m.empty()) {
        for (const auto& [name, t] : params) {
            state.m.emplace_back(t.numel(), 0.0);
            state.v.emplace_back(t.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw Error("adam_step: parameter list changed between steps");
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) throw Error("adam_step: parameter '" + name + "' has no gradient");
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& [name, param] = params[k];
        Tensor t = param;
        auto theta = t.mutable_data();
        const auto g = t.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != theta.size()) throw Error("adam_step: moment shape mismatch for '" + name + "'");
        const double decay = is_decayed(name) ? 1.0 - lr * weight_decay : 1.0;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            theta[i] = theta[i] * decay - lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

double lr_at(std::size_t epoch, const TrainConfig& config) {
    const auto steps = epoch / config.lr_decay_every_epochs;
    return config.initial_lr * std::pow(config.lr_decay_factor, static_cast<double>(steps));
}

std::vector<NamedTensor> trainable_parameters(const ModelParams& params, TrainMode mode) {
    std::vector<NamedTensor> out;
    for (auto& p : params.parameters()) {
        if (mode == TrainMode::baseline_lookup && p.first.starts_with("appearance.")) continue;
        if (mode != TrainMode::baseline_lookup && p.first == "appearance_table") continue;
        out.push_back(std::move(p));
    }
    return out;
}

BatchResult batch_loss(ModelParams& params, const Tensor& rgb, const Tensor& depth,
                       std::span<const std::size_t> lookup_rows, const TrainConfig& config, Rng& rng) {
    const LossWeights w = config.effective_weights();
    const bool lookup = config.mode == TrainMode::baseline_lookup;

    Tensor za;
    Tensor kl_sum;
    if (lookup) {
        za = lookup_appearance(params, lookup_rows);
    } else {
        const auto a = encoder_forward(params.appearance, rgb, Mode::train);
        za = sample_latent(a.mu, a.logvar, rng, Mode::train);
        kl_sum = kl_loss(a.mu, a.logvar);
    }
    const auto s = encoder_forward(params.structure_rgb, rgb, Mode::train);
    const Tensor zs = sample_latent(s.mu, s.logvar, rng, Mode::train);
    const auto b = encoder_forward(params.structure_depth, depth, Mode::train);
    const Tensor zb = sample_latent(b.mu, b.logvar, rng, Mode::train);
    const Tensor xhat = decoder_forward(params.decoder, za, zs, Mode::train);

    const Tensor rec = recon_loss(rgb, xhat);
    const Tensor con = contrastive_loss(zs, zb, w.tau, w.include_positive_in_denominator);
    const Tensor anti = anticontrastive_loss(za, zs);
    for (const Tensor& k : {kl_loss(s.mu, s.logvar), kl_loss(b.mu, b.logvar)}) {
        kl_sum = kl_sum.defined() ? ops::add(kl_sum, k) : k;
    }

    BatchResult r;
    try {
        r.report = total_loss(rec.item(), con.item(), anti.item(), kl_sum.item(), w);
    } catch (const DomainError& e) {
        LossReport raw{std::nan(""), rec.item(), con.item(), anti.item(), kl_sum.item()};
        throw TrainingAborted(e.what(), raw);
    }
    r.objective = ops::add(ops::add(rec, ops::scale(con, w.lambda_con)),
                           ops::add(ops::scale(anti, w.lambda_anti), ops::scale(kl_sum, w.lambda_kl)));
    return r;
}

std::vector<LossReport> train_epoch(ModelParams& params, AdamState& opt, std::span<const MultimodalSample> train,
                                    const TrainConfig& config, std::size_t epoch, Rng& rng) {
    if (train.size() < config.batch_size) {
        throw ConfigError("training partition (" + std::to_string(train.size()) + ") is smaller than batch_size " +
                          std::to_string(config.batch_size));
    }
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());

    const auto trainable = trainable_parameters(params, config.mode);
    const double lr = lr_at(epoch, config);
    std::vector<LossReport> reports;
    for (std::size_t start = 0; start + config.batch_size <= order.size(); start += config.batch_size) {
        const std::span<const std::size_t> idx(order.data() + start, config.batch_size);
        const Tensor rgb = stack_rgb(train, idx);
        const Tensor depth = stack_depth(train, idx);
        for (const auto& [name, t] : trainable) Tensor(t).zero_grad();
        BatchResult r;
        try {
            r = batch_loss(params, rgb, depth, idx, config, rng);
        } catch (const TrainingAborted& e) {
            const auto& l = e.report();
            throw TrainingAborted("epoch " + std::to_string(epoch + 1) + ", batch " +
                                      std::to_string(reports.size() + 1) + ": " + e.what() + " (rec=" +
                                      std::to_string(l.rec) + " con=" + std::to_string(l.con) +
                                      " anti=" + std::to_string(l.anti) + " kl=" + std::to_string(l.kl) + ")",
                                  l);
        }
        backward(r.objective);
        adam_step(trainable, opt, lr, config.weight_decay);
        reports.push_back(r.report);
    }
    return reports;
}

Tensor eval_appearance(ModelParams& params, const Tensor& rgb, TrainMode mode) {
    if (mode != TrainMode::baseline_lookup) return encoder_forward(params.appearance, rgb, Mode::eval).mu;
    const Tensor& table = params.appearance_table;
    const std::size_t rows = table.dim(0), d = table.dim(1), batch = rgb.dim(0);
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) mean[j] += table[r * d + j] / static_cast<double>(rows);
    std::vector<double> out(batch * d);
    for (std::size_t b = 0; b < batch; ++b) std::copy(mean.begin(), mean.end(), out.begin() + b * d);
    return Tensor({batch, d}, std::move(out));
}

double validation_recon(ModelParams& params, std::span<const MultimodalSample> samples, TrainMode mode) {
    if (samples.empty()) throw ConfigError("validation partition is empty");
    NoGradGuard no_grad;
    constexpr std::size_t kChunk = 64;
    double total = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        std::vector<std::size_t> idx(std::min(kChunk, samples.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor rgb = stack_rgb(samples, idx);
        const Tensor za = eval_appearance(params, rgb, mode);
        const Tensor zs = encoder_forward(params.structure_rgb, rgb, Mode::eval).mu;
        const Tensor xhat = decoder_forward(params.decoder, za, zs, Mode::eval);
        total += recon_loss(rgb, xhat).item() * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(samples.size());
}

FitResult fit(const TrainConfig& config, std::span<const MultimodalSample> train,
              std::span<const MultimodalSample> val, const FitHooks& hooks) {
    config.validate();
    if (train.empty() || val.empty()) throw ConfigError("fit needs non-empty train and validation partitions");
    const auto& img = train.front().rgb;
    if (img.dim(1) != config.model.input_size || img.dim(2) != config.model.input_size) {
        throw ConfigError("images are " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) +
                          " but the model expects input_size " + std::to_string(config.model.input_size));
    }

    Rng init_rng(config.seed);
    const std::size_t rows = config.mode == TrainMode::baseline_lookup ? train.size() : 0;
    ModelParams params = init_params(config.model, rows, init_rng);
    AdamState opt;

    FitResult result;
    result.best = params.clone();
    double best = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        Rng rng = Rng::derive(config.seed, epoch + 1);
        const auto reports = train_epoch(params, opt, train, config, epoch, rng);

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = lr_at(epoch, config);
        for (const auto& r : reports) {
            const double n = static_cast<double>(reports.size());
            rec.train.total += r.total / n;
            rec.train.rec += r.rec / n;
            rec.train.con += r.con / n;
            rec.train.anti += r.anti / n;
            rec.train.kl += r.kl / n;
        }
        rec.val_rec = hooks.validator ? hooks.validator(params, rec.epoch) : validation_recon(params, val, config.mode);
        result.history.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);

        if (rec.val_rec < best - 1e-6) {
            best = rec.val_rec;
            stale = 0;
            result.best = params.clone();
            result.best_epoch = rec.epoch;
        } else if (++stale > config.patience) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

void write_history_csv(const std::string& path, std::span<const EpochRecord> history) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.precision(17);
    out << "epoch,lr,train_rec,train_con,train_anti,train_kl,train_total,val_rec\n";
    for (const auto& h : history) {
        out << h.epoch << ',' << h.lr << ',' << h.train.rec << ',' << h.train.con << ',' << h.train.anti << ','
            << h.train.kl << ',' << h.train.total << ',' << h.val_rec << '\n';
    }
    if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace jemb
