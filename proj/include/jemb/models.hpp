#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jemb/ops.hpp"
#include "jemb/rng.hpp"
#include "jemb/tensor.hpp"

namespace jemb {

enum class Mode { train, eval };

/// Architecture of one convolutional VAE encoder. The decoder mirrors the RGB
/// encoder's configuration.
struct EncoderConfig {
    std::size_t input_channels = 3;
    std::size_t input_size = 32;
    std::size_t conv_blocks = 3;
    std::size_t base_channels = 16;
    std::size_t channel_growth = 2;
    std::size_t latent_dim = 16;

    void validate() const;
    /// Output channels of each conv block.
    std::vector<std::size_t> block_channels() const;
    /// Spatial extent after the last block.
    std::size_t final_extent() const { return input_size >> conv_blocks; }
    std::size_t flat_features() const;

    EncoderConfig with_channels(std::size_t channels) const {
        EncoderConfig c = *this;
        c.input_channels = channels;
        return c;
    }

    bool operator==(const EncoderConfig&) const = default;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// conv(3x3, stride 2, pad 1) -> batch norm -> relu. Decoder blocks use the
/// transposed convolution; the decoder's output block has no batch norm.
struct ConvBlock {
    Tensor weight;
    Tensor bias;
    Tensor gamma;  // undefined when the block has no batch norm
    Tensor beta;
    ops::BatchNormState norm;
};

struct EncoderParams {
    EncoderConfig config;
    std::vector<ConvBlock> blocks;
    Tensor mu_weight, mu_bias;
    Tensor logvar_weight, logvar_bias;
};

struct DecoderParams {
    EncoderConfig config;  // of the RGB encoder it mirrors
    Tensor proj_weight, proj_bias;
    std::vector<ConvBlock> blocks;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// All weights of the three encoders, the decoder and the optional per-image
/// appearance table used by the lookup baseline.
struct ModelParams {
    EncoderParams appearance;       // RGB -> appearance code
    EncoderParams structure_rgb;    // RGB -> structure code
    EncoderParams structure_depth;  // depth -> structure code
    DecoderParams decoder;
    Tensor appearance_table;  // (rows, d); undefined unless lookup baseline

    const EncoderConfig& config() const { return appearance.config; }
    bool has_lookup() const { return appearance_table.defined(); }

    /// Learnable tensors (requires_grad) with stable dotted names.
    std::vector<NamedTensor> parameters() const;
    /// Batch-norm running statistics.
    std::vector<NamedTensor> buffers() const;
    /// parameters() followed by buffers(): everything a checkpoint stores.
    std::vector<NamedTensor> state() const;

    /// Independent deep copy.
    ModelParams clone() const;
};

struct EncoderOutput {
    Tensor mu;      // (B,d)
    Tensor logvar;  // (B,d), clamped to [-10,10]
};

struct LatentCode {
    Tensor mu;
    Tensor logvar;
    Tensor z;
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

/// He-normal conv/linear weights, zero biases, unit batch-norm scale, zero
/// shift, lookup table ~ N(0, 0.01). lookup_rows == 0 disables the table.
ModelParams init_params(const EncoderConfig& rgb_config, std::size_t lookup_rows, Rng& rng);

/// x is (B, input_channels, input_size, input_size). Train mode normalizes with
/// batch statistics and updates the running estimates.
EncoderOutput encoder_forward(EncoderParams& params, const Tensor& x, Mode mode);

/// Train: mu + exp(logvar/2) * eps with eps ~ N(0,I) drawn from rng.
/// Eval: returns mu itself.
Tensor sample_latent(const Tensor& mu, const Tensor& logvar, Rng& rng, Mode mode);

/// Decodes concat(z_a, z_s) (appearance first) into (B,3,S,S) images in [0,1].
Tensor decoder_forward(DecoderParams& params, const Tensor& z_a, const Tensor& z_s, Mode mode);

/// Appearance-table rows for the given image indices, (k,d), gradient-carrying.
Tensor lookup_appearance(const ModelParams& params, std::span<const std::size_t> image_indices);
Tensor lookup_appearance(const ModelParams& params, std::size_t image_index);

/// Checkpoint layout: "JCK1", u64 header length, UTF-8 JSON header, then TSR1
/// blobs back to back. The header maps tensor names to byte offsets (relative
/// to the first blob) and records the encoder config plus caller metadata.
void save_checkpoint(const std::string& path, const ModelParams& params, const nlohmann::json& metadata = {});
void write_checkpoint(std::ostream& out, const ModelParams& params, const nlohmann::json& metadata = {});

struct Checkpoint {
    ModelParams params;
    nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::string& path);
Checkpoint read_checkpoint(std::istream& in);

}  // namespace jemb
