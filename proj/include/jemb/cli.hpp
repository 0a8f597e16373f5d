#pragma once

#include <iosfwd>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "jemb/analysis.hpp"
#include "jemb/training.hpp"

namespace jemb {

inline constexpr const char* kToolVersion = "0.1.0";

/// Everything needed to reproduce a training run.
struct RunManifest {
    TrainConfig config;  // fully resolved, mode included
    std::string tool_version = kToolVersion;
    std::string data_path;
    std::string out_dir;
    std::uint64_t split_seed = 0;
    nlohmann::json timings = nlohmann::json::object();
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest load_manifest(const std::string& path);

/// Split seed derived from the run seed.
std::uint64_t split_seed_for(std::uint64_t seed);

/// Stratified 80/10/10 partition of a dataset: train, validation, test.
std::vector<std::vector<std::size_t>> standard_split(std::span<const MultimodalSample> samples,
                                                     std::uint64_t split_seed);

struct GenerateOptions {
    std::string out;
    std::size_t n = 2000;
    int palettes = 4;
    int layouts = 4;
    std::size_t size = 32;
    std::uint64_t seed = 0;
};
void cmd_generate(const GenerateOptions& opts, std::ostream& log);

struct TrainOptions {
    std::string data;         // overrides the manifest's data path when set
    std::string config;       // JSON config file
    std::string manifest;     // earlier run manifest, instead of config
    std::optional<TrainMode> mode;
    std::string out;          // overrides the manifest's output dir when set
};
/// The manifest a training run would use: config from --config (desk preset
/// when absent) or an earlier manifest, with command-line overrides applied.
/// The contrastive ablation records its zeroed weights.
RunManifest resolve_run(const TrainOptions& opts);

/// Writes <out>/manifest.json before training, then model.ckpt and
/// history.csv, and finally the manifest again with timings.
RunManifest cmd_train(const TrainOptions& opts, std::ostream& log);

struct EvalOptions {
    std::string ckpt;
    std::string data;
    std::string out;
};
/// Metrics on the validation partition recorded in the checkpoint, written
/// to <out>/metrics.json, plus PCA CSV/SVG per latent space.
EvalMetrics cmd_eval(const EvalOptions& opts, std::ostream& log);

struct ModifyOptions {
    std::string ckpt;
    std::string data;
    int source_class = 1;
    int target_class = 0;
    std::string out;
};
/// Swaps validation images of the source class onto the train-split mean
/// appearance of the target class. Writes before/after PPM pairs and
/// <out>/swap_metrics.json.
SwapMetrics cmd_modify(const ModifyOptions& opts, std::ostream& log);

}  // namespace jemb
