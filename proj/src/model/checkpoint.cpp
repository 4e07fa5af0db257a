#include "hmar/checkpoint.hpp"

#include <json.hpp>

#include "hmar/errors.hpp"
#include "hmar/io.hpp"

namespace hmar {

namespace {

constexpr std::string_view kMagic = "HMAR0001";

nlohmann::ordered_json config_json(const ModelConfig& c) {
    const BackboneConfig& b = c.backbone;
    return {{"backbone",
             {{"input_size", b.input_size},
              {"in_channels", b.in_channels},
              {"shallow_channels", b.shallow_channels},
              {"deep_channels", b.deep_channels},
              {"blocks_shallow", b.blocks_shallow},
              {"blocks_deep", b.blocks_deep},
              {"downsample_factor_shallow", b.downsample_factor_shallow},
              {"num_classes", b.num_classes}}},
            {"kan", {{"grid_size", c.kan.grid_size}, {"range", c.kan.range}, {"degree", c.kan.degree}}},
            {"bits", c.bits}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    const auto& b = j.at("backbone");
    c.backbone.input_size = b.at("input_size");
    c.backbone.in_channels = b.at("in_channels");
    c.backbone.shallow_channels = b.at("shallow_channels");
    c.backbone.deep_channels = b.at("deep_channels");
    c.backbone.blocks_shallow = b.at("blocks_shallow");
    c.backbone.blocks_deep = b.at("blocks_deep");
    c.backbone.downsample_factor_shallow = b.at("downsample_factor_shallow");
    c.backbone.num_classes = b.at("num_classes");
    c.kan.grid_size = j.at("kan").at("grid_size");
    c.kan.range = j.at("kan").at("range");
    c.kan.degree = j.at("kan").at("degree");
    c.bits = j.at("bits");
    return c;
}

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params) {
    ByteWriter w;
    w.put_bytes(kMagic);
    const std::string meta = config_json(params.config).dump();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
    w.put_bytes(meta);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& [name, t] : params.tensors) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        for (double v : t.data()) w.put_f32(static_cast<float>(v));
    }
    return std::move(w.bytes());
}

ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "checkpoint");
    if (r.get_string(kMagic.size()) != kMagic) r.fail("bad magic (expected HMAR0001)");
    ModelParams p;
    try {
        p.config = config_from_json(nlohmann::json::parse(r.get_string(r.get<std::uint32_t>())));
        p.config.validate();
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad metadata: ") + e.what());
    } catch (const DomainError& e) {
        r.fail(std::string("bad metadata: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t n = 0; n < count; ++n) {
        std::string name = r.get_string(r.get<std::uint32_t>());
        Shape shape(r.get<std::uint32_t>());
        for (auto& d : shape) d = r.get<std::uint32_t>();
        const std::size_t size = shape_size(shape);
        if (size > r.remaining() / 4) r.fail("tensor " + name + " runs past the end of the file");
        std::vector<double> data(size);
        for (auto& v : data) v = static_cast<double>(r.get_f32());
        if (!p.tensors.emplace(name, Tensor(std::move(shape), std::move(data))).second) r.fail("duplicate tensor " + name);
    }
    if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
    for (const auto& [name, shape] : parameter_shapes(p.config)) {
        const auto it = p.tensors.find(name);
        if (it == p.tensors.end()) r.fail("missing tensor " + name);
        if (it->second.shape() != shape)
            r.fail("tensor " + name + " has shape " + shape_string(it->second.shape()) + ", expected " + shape_string(shape));
    }
    if (p.tensors.size() != parameter_shapes(p.config).size()) r.fail("unexpected extra tensors");
    return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    write_file(path, serialize_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    try {
        return deserialize_checkpoint(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ModelParams round_to_fp32(const ModelParams& params) {
    ModelParams out = params;
    for (auto& [name, t] : out.tensors)
        for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
    return out;
}

} // namespace hmar
