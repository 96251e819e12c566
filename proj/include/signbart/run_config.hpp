#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "signbart/checkpoint.hpp"
#include "signbart/error.hpp"
#include "signbart/trainer.hpp"

namespace signbart {

struct DataConfig {
    std::string expected_state;  // empty = no check
};

/// Run configuration: strict schema (unknown keys rejected), every omitted
/// field materialized from the defaults when re-serialized.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
};

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& config) {
    nlohmann::ordered_json j;
    j["batch_size"] = config.batch_size;
    j["base_lr"] = config.base_lr;
    j["weight_decay"] = config.weight_decay;
    j["epochs"] = config.epochs;
    j["warmup_fraction"] = config.warmup_fraction;
    j["seed"] = config.seed;
    j["min_lr"] = config.min_lr;
    j["beta1"] = config.beta1;
    j["beta2"] = config.beta2;
    j["adam_eps"] = config.adam_eps;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig config = {}) {
    if (!j.is_object()) throw SchemaError("train config must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "batch_size") config.batch_size = value.get<std::size_t>();
        else if (key == "base_lr") config.base_lr = value.get<double>();
        else if (key == "weight_decay") config.weight_decay = value.get<double>();
        else if (key == "epochs") config.epochs = value.get<std::size_t>();
        else if (key == "warmup_fraction") config.warmup_fraction = value.get<double>();
        else if (key == "seed") config.seed = value.get<std::uint64_t>();
        else if (key == "min_lr") config.min_lr = value.get<double>();
        else if (key == "beta1") config.beta1 = value.get<double>();
        else if (key == "beta2") config.beta2 = value.get<double>();
        else if (key == "adam_eps") config.adam_eps = value.get<double>();
        else throw SchemaError("train config: unknown key '" + key + "'");
    }
    try {
        config.validate();
    } catch (const Error& e) {
        throw SchemaError(e.message());
    }
    return config;
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& config) {
    nlohmann::ordered_json j;
    j["model"] = model_config_to_json(config.model);
    j["train"] = train_config_to_json(config.train);
    j["data"] = {{"expected_state", config.data.expected_state}};
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SchemaError("run config must be an object");
    RunConfig config;
    for (const auto& [key, value] : j.items()) {
        if (key == "model") {
            config.model = model_config_from_json(value);
        } else if (key == "train") {
            config.train = train_config_from_json(value);
        } else if (key == "data") {
            if (!value.is_object()) throw SchemaError("data config must be an object");
            for (const auto& [dkey, dvalue] : value.items()) {
                if (dkey == "expected_state") config.data.expected_state = dvalue.get<std::string>();
                else throw SchemaError("data config: unknown key '" + dkey + "'");
            }
        } else {
            throw SchemaError("run config: unknown key '" + key + "'");
        }
    }
    return config;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("config '" + path + "': " + e.what());
    }
    try {
        return run_config_from_json(j);
    } catch (const Error& e) {
        throw SchemaError("config '" + path + "': " + e.message());
    }
}

inline void save_run_config(const RunConfig& config, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << run_config_to_json(config).dump(2) << '\n';
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace signbart
