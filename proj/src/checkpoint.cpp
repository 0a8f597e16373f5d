#include <fstream>
#include <sstream>

#include "jemb/binary_io.hpp"
#include "jemb/error.hpp"
#include "jemb/models.hpp"

namespace jemb {

void write_checkpoint(std::ostream& out, const ModelParams& params, const nlohmann::json& metadata) {
    const auto tensors = params.state();
    nlohmann::json header;
    header["format"] = "jemb-checkpoint";
    header["version"] = 1;
    header["encoder_config"] = to_json(params.config());
    header["lookup_rows"] = params.has_lookup() ? params.appearance_table.dim(0) : 0;
    header["metadata"] = metadata.is_null() ? nlohmann::json::object() : metadata;
    nlohmann::json offsets = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        offsets[name] = offset;
        offset += tensor_byte_size(t);
    }
    header["tensors"] = offsets;
    const std::string text = header.dump();

    out.write("JCK1", 4);
    binary::write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors) write_tensor(out, t);
}

void save_checkpoint(const std::string& path, const ModelParams& params, const nlohmann::json& metadata) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_checkpoint(out, params, metadata);
    if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

Checkpoint read_checkpoint(std::istream& in) {
    binary::expect_magic(in, "JCK1");
    const auto length = binary::read_pod<std::uint64_t>(in, "checkpoint header length");
    const auto header_at = binary::position(in);
    if (length > (std::uint64_t{1} << 30)) throw FormatError("checkpoint header too large", header_at - 8);
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (static_cast<std::uint64_t>(in.gcount()) != length) throw FormatError("truncated checkpoint header", header_at);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid checkpoint header: ") + e.what(), header_at);
    }
    if (header.value("format", "") != "jemb-checkpoint") throw FormatError("not a jemb checkpoint", header_at);

    Checkpoint ck;
    const EncoderConfig cfg = encoder_config_from_json(header.at("encoder_config"));
    // Build the architecture, then overwrite every tensor from the file.
    Rng scratch(0);
    ck.params = init_params(cfg, header.at("lookup_rows").get<std::size_t>(), scratch);
    ck.metadata = header.value("metadata", nlohmann::json::object());

    const auto& offsets = header.at("tensors");
    const auto blobs_at = binary::position(in);
    std::uint64_t expected = 0;
    for (auto& [name, t] : ck.params.state()) {
        if (!offsets.contains(name)) throw FormatError("checkpoint is missing tensor '" + name + "'", header_at);
        if (offsets.at(name).get<std::uint64_t>() != expected) {
            throw FormatError("checkpoint tensor '" + name + "' is not at its recorded offset", blobs_at + expected);
        }
        const Tensor loaded = read_tensor(in);
        if (loaded.shape() != t.shape()) {
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(loaded.shape()) +
                                  ", architecture expects " + shape_str(t.shape()),
                              blobs_at + expected);
        }
        Tensor target = t;
        std::copy(loaded.data().begin(), loaded.data().end(), target.mutable_data().begin());
        expected += tensor_byte_size(t);
    }
    if (offsets.size() != ck.params.state().size()) {
        throw FormatError("checkpoint holds tensors unknown to this architecture", header_at);
    }
    return ck;
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    return read_checkpoint(in);
}

}  // namespace jemb
