#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jemb/data.hpp"
#include "jemb/error.hpp"
#include "jemb/losses.hpp"
#include "jemb/models.hpp"

namespace jemb {

enum class TrainMode { joint, baseline_lookup, ablation_no_contrastive };

std::string to_string(TrainMode mode);
/// Accepts "joint", "baseline" and "ablate-contrastive".
TrainMode parse_train_mode(const std::string& text);

struct TrainConfig {
    EncoderConfig model;
    std::size_t batch_size = 32;
    double initial_lr = 0.0012;
    double lr_decay_factor = 0.8;
    std::size_t lr_decay_every_epochs = 50;
    double weight_decay = 1e-5;
    std::size_t max_epochs = 150;
    std::size_t patience = 5;
    LossWeights loss;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::joint;

    void validate() const;
    /// Loss weights after applying the mode (the ablation zeroes con and anti).
    LossWeights effective_weights() const;
    bool operator==(const TrainConfig&) const = default;
};

/// 128x128 inputs, 5 blocks of 32..512 channels, d=128, batch 64, 400 epochs.
TrainConfig full_config();
/// 32x32 inputs, 3 blocks of 16..64 channels, d=16. Loss weights 1/100/1,
/// tau 0.4, at most 70 epochs with patience 10.
TrainConfig desk_config();

/// Flat JSON schema; every field is written.
nlohmann::json to_json(const TrainConfig& c);
/// Starts from the "preset" key ("desk" or "full", default desk) and
/// overrides listed fields. Unknown keys and wrongly typed values throw
/// ConfigError naming the key path.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// Batch-norm scale/shift and the lookup table are not decayed.
bool is_decayed(const std::string& name);

/// One Adam step with bias correction. Decay is decoupled and applied before
/// the update: theta <- theta * (1 - lr * wd) for decayed parameters. Throws
/// Error naming any parameter without a gradient. Moments are created on the
/// first call and must keep the same parameter list afterwards.
void adam_step(std::span<const NamedTensor> params, AdamState& state, double lr, double weight_decay);

/// initial_lr * decay_factor ^ floor(epoch / decay_every), epoch counted from 0.
double lr_at(std::size_t epoch, const TrainConfig& config);

/// Parameters updated in the given mode (the lookup baseline leaves the
/// appearance encoder untouched).
std::vector<NamedTensor> trainable_parameters(const ModelParams& params, TrainMode mode);

/// Thrown when a batch produces a non-finite loss.
class TrainingAborted : public Error {
  public:
    TrainingAborted(const std::string& what, LossReport report) : Error(what), report_(report) {}
    const LossReport& report() const noexcept { return report_; }

  private:
    LossReport report_;
};

/// Forward pass and loss terms for one batch. lookup_rows are the table rows
/// of the batch samples (baseline mode only).
struct BatchResult {
    Tensor objective;  // weighted total, differentiable
    LossReport report;
};
BatchResult batch_loss(ModelParams& params, const Tensor& rgb, const Tensor& depth,
                       std::span<const std::size_t> lookup_rows, const TrainConfig& config, Rng& rng);

/// Shuffles, then runs every full batch (the partial tail is dropped) through
/// batch_loss, backward and adam_step. Sample i of the partition owns lookup row i.
std::vector<LossReport> train_epoch(ModelParams& params, AdamState& opt, std::span<const MultimodalSample> train,
                                    const TrainConfig& config, std::size_t epoch, Rng& rng);

/// Appearance codes used when reconstructing unseen images: the encoder mean
/// in the encoder modes, the mean lookup row in the baseline.
Tensor eval_appearance(ModelParams& params, const Tensor& rgb, TrainMode mode);

/// Mean per-sample reconstruction loss in eval mode (z = mu).
double validation_recon(ModelParams& params, std::span<const MultimodalSample> samples, TrainMode mode);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double lr = 0.0;
    LossReport train;  // batch means
    double val_rec = 0.0;
};

struct FitResult {
    ModelParams best;
    std::size_t best_epoch = 0;  // 0 when no epoch ran
    std::vector<EpochRecord> history;
    bool stopped_early = false;
};

struct FitHooks {
    /// Replaces validation_recon when set.
    std::function<double(ModelParams&, std::size_t epoch)> validator;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains up to max_epochs and keeps the parameters of the epoch with the
/// lowest validation reconstruction loss. An epoch improves when it beats the
/// best by more than 1e-6; training stops once the count of consecutive
/// non-improving epochs exceeds patience.
FitResult fit(const TrainConfig& config, std::span<const MultimodalSample> train,
              std::span<const MultimodalSample> val, const FitHooks& hooks = {});

void write_history_csv(const std::string& path, std::span<const EpochRecord> history);

}  // namespace jemb
