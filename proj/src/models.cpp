#include "jemb/models.hpp"

#include <cmath>

#include "jemb/error.hpp"

namespace jemb {

void EncoderConfig::validate() const {
    if (input_channels == 0) throw ConfigError("encoder: input_channels must be positive");
    if (conv_blocks == 0) throw ConfigError("encoder: conv_blocks must be positive");
    if (base_channels == 0 || channel_growth == 0) throw ConfigError("encoder: channel sizes must be positive");
    if (latent_dim < 2) throw ConfigError("encoder: latent_dim must be at least 2");
    if (conv_blocks >= 16 || input_size == 0 || input_size % (std::size_t{1} << conv_blocks) != 0) {
        throw ConfigError("encoder: input_size " + std::to_string(input_size) + " is not divisible by 2^" +
                          std::to_string(conv_blocks));
    }
}

std::vector<std::size_t> EncoderConfig::block_channels() const {
    std::vector<std::size_t> out;
    std::size_t c = base_channels;
    for (std::size_t i = 0; i < conv_blocks; ++i) {
        out.push_back(c);
        c *= channel_growth;
    }
    return out;
}

std::size_t EncoderConfig::flat_features() const {
    return block_channels().back() * final_extent() * final_extent();
}

nlohmann::json to_json(const EncoderConfig& c) {
    return {{"input_channels", c.input_channels}, {"input_size", c.input_size},
            {"conv_blocks", c.conv_blocks},       {"base_channels", c.base_channels},
            {"channel_growth", c.channel_growth}, {"latent_dim", c.latent_dim}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.input_size = j.at("input_size").get<std::size_t>();
    c.conv_blocks = j.at("conv_blocks").get<std::size_t>();
    c.base_channels = j.at("base_channels").get<std::size_t>();
    c.channel_growth = j.at("channel_growth").get<std::size_t>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.validate();
    return c;
}

namespace {

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
    Tensor t = rng.normal_tensor(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
    t.set_requires_grad(true);
    return t;
}

Tensor learnable(Shape shape, double fill) {
    Tensor t(std::move(shape), fill);
    t.set_requires_grad(true);
    return t;
}

ConvBlock make_block(Rng& rng, std::size_t in, std::size_t out, bool transposed, bool normed) {
    ConvBlock b;
    // Weight layout is (Cout,Cin,3,3) for conv and (Cin,Cout,3,3) for the transpose.
    b.weight = transposed ? he_normal(rng, {in, out, 3, 3}, in * 9) : he_normal(rng, {out, in, 3, 3}, in * 9);
    b.bias = learnable({out}, 0.0);
    if (normed) {
        b.gamma = learnable({out}, 1.0);
        b.beta = learnable({out}, 0.0);
        b.norm.running_mean = Tensor({out}, 0.0);
        b.norm.running_var = Tensor({out}, 1.0);
    }
    return b;
}

EncoderParams make_encoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams e;
    e.config = cfg;
    std::size_t in = cfg.input_channels;
    for (std::size_t out : cfg.block_channels()) {
        e.blocks.push_back(make_block(rng, in, out, false, true));
        in = out;
    }
    const std::size_t flat = cfg.flat_features();
    e.mu_weight = he_normal(rng, {cfg.latent_dim, flat}, flat);
    e.mu_bias = learnable({cfg.latent_dim}, 0.0);
    e.logvar_weight = he_normal(rng, {cfg.latent_dim, flat}, flat);
    e.logvar_bias = learnable({cfg.latent_dim}, 0.0);
    return e;
}

DecoderParams make_decoder(const EncoderConfig& cfg, Rng& rng) {
    DecoderParams d;
    d.config = cfg;
    const std::size_t in = 2 * cfg.latent_dim;
    d.proj_weight = he_normal(rng, {cfg.flat_features(), in}, in);
    d.proj_bias = learnable({cfg.flat_features()}, 0.0);
    const auto channels = cfg.block_channels();
    for (std::size_t j = 0; j < channels.size(); ++j) {
        const std::size_t from = channels[channels.size() - 1 - j];
        const bool last = j + 1 == channels.size();
        const std::size_t to = last ? cfg.input_channels : channels[channels.size() - 2 - j];
        d.blocks.push_back(make_block(rng, from, to, true, !last));
    }
    return d;
}

void append_block(std::vector<NamedTensor>& out, const std::string& prefix, const ConvBlock& b, bool buffers) {
    if (buffers) {
        if (b.gamma.defined()) {
            out.emplace_back(prefix + ".running_mean", b.norm.running_mean);
            out.emplace_back(prefix + ".running_var", b.norm.running_var);
        }
        return;
    }
    out.emplace_back(prefix + ".weight", b.weight);
    out.emplace_back(prefix + ".bias", b.bias);
    if (b.gamma.defined()) {
        out.emplace_back(prefix + ".gamma", b.gamma);
        out.emplace_back(prefix + ".beta", b.beta);
    }
}

void append_encoder(std::vector<NamedTensor>& out, const std::string& prefix, const EncoderParams& e, bool buffers) {
    for (std::size_t i = 0; i < e.blocks.size(); ++i)
        append_block(out, prefix + ".block" + std::to_string(i), e.blocks[i], buffers);
    if (buffers) return;
    out.emplace_back(prefix + ".mu.weight", e.mu_weight);
    out.emplace_back(prefix + ".mu.bias", e.mu_bias);
    out.emplace_back(prefix + ".logvar.weight", e.logvar_weight);
    out.emplace_back(prefix + ".logvar.bias", e.logvar_bias);
}

void append_all(std::vector<NamedTensor>& out, const ModelParams& p, bool buffers) {
    append_encoder(out, "appearance", p.appearance, buffers);
    append_encoder(out, "structure_rgb", p.structure_rgb, buffers);
    append_encoder(out, "structure_depth", p.structure_depth, buffers);
    if (!buffers) {
        out.emplace_back("decoder.proj.weight", p.decoder.proj_weight);
        out.emplace_back("decoder.proj.bias", p.decoder.proj_bias);
    }
    for (std::size_t i = 0; i < p.decoder.blocks.size(); ++i)
        append_block(out, "decoder.block" + std::to_string(i), p.decoder.blocks[i], buffers);
    if (!buffers && p.has_lookup()) out.emplace_back("appearance_table", p.appearance_table);
}

ConvBlock clone_block(const ConvBlock& b) {
    ConvBlock c;
    c.weight = b.weight.clone();
    c.bias = b.bias.clone();
    if (b.gamma.defined()) {
        c.gamma = b.gamma.clone();
        c.beta = b.beta.clone();
        c.norm.running_mean = b.norm.running_mean.clone();
        c.norm.running_var = b.norm.running_var.clone();
    }
    c.norm.momentum = b.norm.momentum;
    c.norm.eps = b.norm.eps;
    return c;
}

EncoderParams clone_encoder(const EncoderParams& e) {
    EncoderParams c;
    c.config = e.config;
    for (const auto& b : e.blocks) c.blocks.push_back(clone_block(b));
    c.mu_weight = e.mu_weight.clone();
    c.mu_bias = e.mu_bias.clone();
    c.logvar_weight = e.logvar_weight.clone();
    c.logvar_bias = e.logvar_bias.clone();
    return c;
}

}  // namespace

std::vector<NamedTensor> ModelParams::parameters() const {
    std::vector<NamedTensor> out;
    append_all(out, *this, false);
    return out;
}

std::vector<NamedTensor> ModelParams::buffers() const {
    std::vector<NamedTensor> out;
    append_all(out, *this, true);
    return out;
}

std::vector<NamedTensor> ModelParams::state() const {
    auto out = parameters();
    auto extra = buffers();
    out.insert(out.end(), extra.begin(), extra.end());
    return out;
}

ModelParams ModelParams::clone() const {
    ModelParams c;
    c.appearance = clone_encoder(appearance);
    c.structure_rgb = clone_encoder(structure_rgb);
    c.structure_depth = clone_encoder(structure_depth);
    c.decoder.config = decoder.config;
    c.decoder.proj_weight = decoder.proj_weight.clone();
    c.decoder.proj_bias = decoder.proj_bias.clone();
    for (const auto& b : decoder.blocks) c.decoder.blocks.push_back(clone_block(b));
    if (has_lookup()) c.appearance_table = appearance_table.clone();
    return c;
}

ModelParams init_params(const EncoderConfig& rgb_config, std::size_t lookup_rows, Rng& rng) {
    const EncoderConfig rgb = rgb_config.with_channels(3);
    rgb.validate();
    ModelParams p;
    p.appearance = make_encoder(rgb, rng);
    p.structure_rgb = make_encoder(rgb, rng);
    p.structure_depth = make_encoder(rgb.with_channels(1), rng);
    p.decoder = make_decoder(rgb, rng);
    if (lookup_rows > 0) {
        p.appearance_table = rng.normal_tensor({lookup_rows, rgb.latent_dim}, 0.01);
        p.appearance_table.set_requires_grad(true);
    }
    return p;
}

EncoderOutput encoder_forward(EncoderParams& params, const Tensor& x, Mode mode) {
    const auto& cfg = params.config;
    if (x.rank() != 4 || x.dim(1) != cfg.input_channels || x.dim(2) != cfg.input_size ||
        x.dim(3) != cfg.input_size) {
        throw ShapeError("encoder: expected input (B," + std::to_string(cfg.input_channels) + "," +
                         std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "), got " +
                         shape_str(x.shape()));
    }
    const bool training = mode == Mode::train;
    Tensor h = x;
    for (auto& block : params.blocks) {
        h = ops::conv2d(h, block.weight, block.bias, {.stride = 2, .padding = 1});
        h = ops::batch_norm2d(h, block.gamma, block.beta, block.norm, training);
        h = ops::relu(h);
    }
    const std::size_t batch = x.dim(0);
    h = ops::reshape(h, {batch, h.numel() / batch});
    EncoderOutput out;
    out.mu = ops::linear(h, params.mu_weight, params.mu_bias);
    out.logvar = ops::clamp(ops::linear(h, params.logvar_weight, params.logvar_bias), kLogvarMin, kLogvarMax);
    return out;
}

Tensor sample_latent(const Tensor& mu, const Tensor& logvar, Rng& rng, Mode mode) {
    if (mu.shape() != logvar.shape()) {
        throw ShapeError("sample_latent: mu " + shape_str(mu.shape()) + " vs logvar " + shape_str(logvar.shape()));
    }
    if (mode == Mode::eval) return mu;
    const Tensor eps = rng.normal_tensor(mu.shape());
    return ops::add(mu, ops::mul(ops::exp(ops::scale(logvar, 0.5)), eps));
}

Tensor decoder_forward(DecoderParams& params, const Tensor& z_a, const Tensor& z_s, Mode mode) {
    const auto& cfg = params.config;
    for (const Tensor* z : {&z_a, &z_s}) {
        if (z->rank() != 2 || z->dim(1) != cfg.latent_dim) {
            throw ShapeError("decoder: expected latent (B," + std::to_string(cfg.latent_dim) + "), got " +
                             shape_str(z->shape()));
        }
    }
    if (z_a.dim(0) != z_s.dim(0)) {
        throw ShapeError("decoder: batch mismatch " + shape_str(z_a.shape()) + " vs " + shape_str(z_s.shape()));
    }
    const bool training = mode == Mode::train;
    const std::size_t batch = z_a.dim(0);
    const std::size_t side = cfg.final_extent();
    Tensor h = ops::linear(ops::concat(z_a, z_s, 1), params.proj_weight, params.proj_bias);
    h = ops::relu(ops::reshape(h, {batch, cfg.block_channels().back(), side, side}));
    for (auto& block : params.blocks) {
        h = ops::conv_transpose2d(h, block.weight, block.bias, {.stride = 2, .padding = 1}, 1);
        if (block.gamma.defined()) {
            h = ops::relu(ops::batch_norm2d(h, block.gamma, block.beta, block.norm, training));
        }
    }
    return ops::sigmoid(h);
}

Tensor lookup_appearance(const ModelParams& params, std::span<const std::size_t> image_indices) {
    if (!params.has_lookup()) throw Error("lookup_appearance: model has no appearance table");
    const std::size_t rows = params.appearance_table.dim(0);
    for (std::size_t i : image_indices) {
        if (i >= rows) {
            throw Error("lookup_appearance: image index " + std::to_string(i) + " out of range for " +
                        std::to_string(rows) + " rows");
        }
    }
    return ops::gather_rows(params.appearance_table, image_indices);
}

Tensor lookup_appearance(const ModelParams& params, std::size_t image_index) {
    const std::size_t idx[] = {image_index};
    return lookup_appearance(params, idx);
}

}  // namespace jemb
