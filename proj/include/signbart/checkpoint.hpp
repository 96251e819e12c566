#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "signbart/error.hpp"
#include "signbart/model.hpp"

namespace signbart {

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& config) {
    nlohmann::ordered_json j;
    j["d_model"] = config.d_model;
    j["ff_dim"] = config.ff_dim;
    j["encoder_layers"] = config.encoder_layers;
    j["decoder_layers"] = config.decoder_layers;
    j["heads"] = config.heads;
    j["num_keypoints"] = config.num_keypoints;
    j["num_classes"] = config.num_classes;
    j["dropout"] = config.dropout;
    j["max_len"] = config.max_len;
    j["use_projection"] = config.use_projection;
    return j;
}

/// Strict parse: unknown keys are rejected, known keys fall back to the
/// defaults already present in `config`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig config = {}) {
    if (!j.is_object()) throw SchemaError("model config must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "d_model") config.d_model = value.get<std::size_t>();
        else if (key == "ff_dim") config.ff_dim = value.get<std::size_t>();
        else if (key == "encoder_layers") config.encoder_layers = value.get<std::size_t>();
        else if (key == "decoder_layers") config.decoder_layers = value.get<std::size_t>();
        else if (key == "heads") config.heads = value.get<std::size_t>();
        else if (key == "num_keypoints") config.num_keypoints = value.get<std::size_t>();
        else if (key == "num_classes") config.num_classes = value.get<std::size_t>();
        else if (key == "dropout") config.dropout = value.get<double>();
        else if (key == "max_len") config.max_len = value.get<std::size_t>();
        else if (key == "use_projection") config.use_projection = value.get<bool>();
        else throw SchemaError("model config: unknown key '" + key + "'");
    }
    try {
        config.validate();
    } catch (const Error& e) {
        throw SchemaError(e.message());
    }
    return config;
}

struct CheckpointMeta {
    std::string data_state;  // sequence state the model was trained on
    std::int64_t epoch = -1;
    double val_top1 = 0.0;
    std::uint64_t seed = 0;
};

struct Checkpoint {
    ModelParameters params;
    CheckpointMeta meta;
};

namespace detail {

constexpr const char* kCheckpointFormat = "signbart-checkpoint";
constexpr int kCheckpointVersion = 1;

}  // namespace detail

/// One JSON header line (format, version, config, meta, tensor directory
/// with byte offsets) followed by the raw little-endian 64-bit floats of
/// every tensor in directory order.
inline void save_checkpoint(const std::string& path, const ModelParameters& params,
                            const CheckpointMeta& meta) {
    nlohmann::ordered_json header;
    header["format"] = detail::kCheckpointFormat;
    header["version"] = detail::kCheckpointVersion;
    header["config"] = model_config_to_json(params.config());
    header["meta"] = {{"data_state", meta.data_state},
                      {"epoch", meta.epoch},
                      {"val_top1", meta.val_top1},
                      {"seed", meta.seed}};
    nlohmann::ordered_json directory = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : params.named()) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = tensor.shape();
        entry["offset"] = offset;
        directory.push_back(std::move(entry));
        offset += tensor.numel() * sizeof(double);
    }
    header["tensors"] = std::move(directory);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << header.dump() << '\n';
    for (const auto& [name, tensor] : params.named()) {
        (void)name;
        out.write(reinterpret_cast<const char*>(tensor.data().data()),
                  static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string header_line;
    if (!std::getline(in, header_line)) {
        throw SchemaError("checkpoint '" + path + "': missing header at byte offset 0");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("checkpoint '" + path + "': malformed header at byte offset 0: " + e.what());
    }
    const std::uint64_t payload_start = static_cast<std::uint64_t>(header_line.size()) + 1;
    try {
        if (header.at("format").get<std::string>() != detail::kCheckpointFormat) {
            throw SchemaError("not a signbart checkpoint");
        }
        if (header.at("version").get<int>() != detail::kCheckpointVersion) {
            throw SchemaError("unsupported checkpoint version");
        }
        const ModelConfig config = model_config_from_json(header.at("config"));
        CheckpointMeta meta;
        const auto& meta_json = header.at("meta");
        meta.data_state = meta_json.at("data_state").get<std::string>();
        meta.epoch = meta_json.at("epoch").get<std::int64_t>();
        meta.val_top1 = meta_json.at("val_top1").get<double>();
        meta.seed = meta_json.at("seed").get<std::uint64_t>();

        NamedTensors tensors;
        for (const auto& entry : header.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const Shape shape = entry.at("shape").get<Shape>();
            const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
            const std::size_t count = shape_numel(shape);
            std::vector<double> values(count);
            in.seekg(static_cast<std::streamoff>(payload_start + offset));
            in.read(reinterpret_cast<char*>(values.data()),
                    static_cast<std::streamsize>(count * sizeof(double)));
            if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double)) {
                throw SchemaError("truncated tensor '" + name + "' at byte offset " +
                                  std::to_string(payload_start + offset));
            }
            tensors.emplace_back(name, Tensor::from_data(shape, std::move(values)));
        }
        return Checkpoint{ModelParameters::from_named(config, tensors), meta};
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("checkpoint '" + path + "': bad header field: " + e.what());
    } catch (const Error& e) {
        throw SchemaError("checkpoint '" + path + "': " + e.message());
    }
}

}  // namespace signbart
