// signbart: coordinate-split skeleton-sequence sign classifier CLI.
//
// Exit codes: 0 success, 1 usage/validation, 2 runtime failure. Every error
// path prints a single "error: <kind>: <reason>" line to stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "signbart/checkpoint.hpp"
#include "signbart/dataset_io.hpp"
#include "signbart/model.hpp"
#include "signbart/run_config.hpp"
#include "signbart/skeleton.hpp"
#include "signbart/trainer.hpp"

namespace fs = std::filesystem;
using namespace signbart;

namespace {

std::vector<Part> parse_parts(const std::string& csv) {
    std::vector<Part> parts;
    std::stringstream stream(csv);
    std::string token;
    while (std::getline(stream, token, ',')) {
        if (!token.empty()) parts.push_back(parse_part(token));
    }
    if (parts.empty()) throw ParameterError("--parts: at least one part is required");
    return parts;
}

std::vector<std::size_t> parse_topk(const std::string& csv) {
    std::vector<std::size_t> ks;
    std::stringstream stream(csv);
    std::string token;
    while (std::getline(stream, token, ',')) {
        if (token.empty()) continue;
        const long value = std::stol(token);
        if (value < 1) throw ParameterError("--topk: values must be >= 1");
        ks.push_back(static_cast<std::size_t>(value));
    }
    if (ks.empty()) throw ParameterError("--topk: at least one k is required");
    return ks;
}

void check_data_state(const std::string& expected, const SequenceState& actual, const char* what) {
    if (expected.empty()) return;
    if (actual.str() != expected) {
        throw StateError(std::string(what) + " is in state '" + actual.str() +
                         "', expected '" + expected + "'");
    }
}

int cmd_synth(std::size_t classes, std::size_t samples, std::uint64_t seed, const std::string& out) {
    auto seqs = generate_synthetic(classes, samples, seed);
    write_dataset(seqs, out);
    std::cout << "wrote " << seqs.size() << " records to " << out << "\n";
    return 0;
}

int cmd_preprocess(const std::string& in, const std::string& out, const std::string& mode_name,
                   const std::string& parts_csv) {
    const NormalizationMode mode = parse_normalization_mode(mode_name);
    const std::vector<Part> parts = parse_parts(parts_csv);
    auto seqs = read_dataset(in);
    if (seqs.empty()) throw ParameterError("input dataset '" + in + "' is empty");
    if (seqs.front().state.kind == SequenceState::Kind::part_normalized) {
        throw StateError("input '" + in + "' is already part-normalized (state '" +
                         seqs.front().state.str() + "'); refusing to normalize twice");
    }
    std::size_t clamped_total = 0;
    std::vector<SkeletonSequence> processed;
    processed.reserve(seqs.size());
    for (auto& seq : seqs) {
        SkeletonSequence current = std::move(seq);
        if (current.state.kind == SequenceState::Kind::raw_pixels) {
            std::size_t clamped = 0;
            current = frame_normalize(current, &clamped);
            clamped_total += clamped;
        }
        current = normalize_parts(current, mode);
        processed.push_back(select_components(current, parts));
    }
    write_dataset(processed, out);
    std::cout << "wrote " << processed.size() << " records to " << out << " (state "
              << processed.front().state.str() << ", K " << processed.front().num_keypoints << ")\n";
    if (clamped_total > 0) {
        std::cout << "clamped " << clamped_total << " out-of-frame coordinates\n";
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& train_path,
              const std::string& val_path, const std::string& out_dir) {
    RunConfig config = load_run_config(config_path);
    auto train_set = read_dataset(train_path);
    auto val_set = read_dataset(val_path);
    if (train_set.empty()) throw ParameterError("train dataset '" + train_path + "' is empty");
    if (val_set.empty()) throw ParameterError("val dataset '" + val_path + "' is empty");
    check_data_state(config.data.expected_state, train_set.front().state, "train dataset");
    check_data_state(config.data.expected_state, val_set.front().state, "val dataset");

    fs::create_directories(out_dir);
    save_run_config(config, (fs::path(out_dir) / "config.effective.json").string());

    auto print_epoch = [](const EpochRecord& r) {
        std::printf("epoch %3zu  loss %.4f  acc %.4f  val@1 %.4f  val@5 %.4f  lr %.3e  %.1fs\n",
                    r.epoch, r.train_loss, r.train_acc, r.val_top1, r.val_top5, r.lr, r.seconds);
        std::fflush(stdout);
    };
    TrainResult result = train(config.model, config.train, train_set, val_set, {}, print_epoch);

    {
        std::ofstream log_out(fs::path(out_dir) / "runlog.jsonl");
        if (!log_out) throw IoError("cannot write run log in '" + out_dir + "'");
        log_out << runlog_to_jsonl(result.log);
    }
    CheckpointMeta meta;
    meta.data_state = train_set.front().state.str();
    meta.seed = config.train.seed;
    meta.epoch = static_cast<std::int64_t>(result.best_epoch);
    meta.val_top1 = result.best_val_top1;
    save_checkpoint((fs::path(out_dir) / "checkpoint_best.bin").string(), result.best_params, meta);
    meta.epoch = static_cast<std::int64_t>(result.log.size());
    meta.val_top1 = result.log.back().val_top1;
    save_checkpoint((fs::path(out_dir) / "checkpoint_final.bin").string(), result.final_params, meta);
    std::cout << "best val@1 " << result.best_val_top1 << " at epoch " << result.best_epoch
              << "; artifacts in " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& topk_csv,
             std::string out_path) {
    const std::vector<std::size_t> ks = parse_topk(topk_csv);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    auto dataset = read_dataset(data_path);
    if (dataset.empty()) throw ParameterError("dataset '" + data_path + "' is empty");
    check_data_state(ckpt.meta.data_state, dataset.front().state, "dataset");
    if (dataset.front().num_keypoints != ckpt.params.config().num_keypoints) {
        throw SchemaError("dataset has " + std::to_string(dataset.front().num_keypoints) +
                          " keypoints, checkpoint expects " +
                          std::to_string(ckpt.params.config().num_keypoints));
    }
    const auto metrics = evaluate(ckpt.params, dataset, ks);
    nlohmann::ordered_json report;
    for (std::size_t k : ks) {
        report["recall@" + std::to_string(k)] = metrics.at(k);
    }
    std::cout << report.dump(2) << "\n";
    if (out_path.empty()) out_path = ckpt_path + ".metrics.json";
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write metrics to '" + out_path + "'");
    out << report.dump(2) << "\n";
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& input_path, std::size_t top) {
    if (top < 1) throw ParameterError("--top must be >= 1");
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    auto dataset = read_dataset(input_path);
    if (dataset.empty()) throw ParameterError("input '" + input_path + "' is empty");
    check_data_state(ckpt.meta.data_state, dataset.front().state, "input");
    const std::size_t classes = ckpt.params.config().num_classes;
    const std::size_t max_len = ckpt.params.config().max_len;
    top = std::min(top, classes);
    Tensor probs = run_inference(ckpt.params, dataset);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        nlohmann::ordered_json record;
        record["id"] = dataset[i].id;
        record["truncated"] = dataset[i].num_frames > max_len;
        std::vector<std::size_t> order(classes);
        for (std::size_t c = 0; c < classes; ++c) order[c] = c;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return probs.at({i, a}) > probs.at({i, b});
        });
        nlohmann::ordered_json ranked = nlohmann::ordered_json::array();
        for (std::size_t r = 0; r < top; ++r) {
            ranked.push_back({{"class", order[r]}, {"probability", probs.at({i, order[r]})}});
        }
        record["predictions"] = std::move(ranked);
        std::cout << record.dump() << "\n";
    }
    return 0;
}

int cmd_params(const std::string& config_path) {
    RunConfig config = load_run_config(config_path);
    Rng rng(0);
    ModelParameters params(config.model, rng);
    std::size_t total = 0;
    std::printf("%-36s %-14s %10s\n", "tensor", "shape", "count");
    for (const auto& [name, tensor] : params.named()) {
        std::printf("%-36s %-14s %10zu\n", name.c_str(), shape_str(tensor.shape()).c_str(),
                    tensor.numel());
        total += tensor.numel();
    }
    std::printf("%-36s %-14s %10zu\n", "total", "", total);
    if (total != count_parameters(config.model)) {
        throw ContractError("parameter count mismatch between enumeration and closed form");
    }
    return 0;
}

int cmd_gradcheck(const std::string& config_path, double tolerance) {
    ModelConfig config;
    if (config_path.empty()) {
        // built-in small configuration
        config.d_model = 8;
        config.ff_dim = 16;
        config.encoder_layers = 1;
        config.decoder_layers = 1;
        config.heads = 2;
        config.num_keypoints = 5;
        config.num_classes = 3;
        config.dropout = 0.0;
        config.max_len = 16;
    } else {
        config = load_run_config(config_path).model;
    }
    const GradCheckReport report = gradient_check(config, tolerance);
    for (const auto& entry : report.entries) {
        std::printf("%-36s max_rel_err %.3e  %s\n", entry.name.c_str(), entry.max_rel_err,
                    entry.pass ? "PASS" : "FAIL");
    }
    std::printf("gradient check %s (tolerance %.1e, %zu tensors)\n",
                report.passed ? "PASSED" : "FAILED", report.tolerance, report.entries.size());
    return report.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"signbart: coordinate-split skeleton-sequence sign classifier"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
    std::size_t classes = 8, samples = 25;
    std::uint64_t seed = 0;
    std::string out;
    synth->add_option("--classes", classes, "number of classes (>= 2)");
    synth->add_option("--samples", samples, "samples per class");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--out", out, "output dataset path")->required();

    auto* preprocess = app.add_subcommand("preprocess", "normalize and select skeleton components");
    std::string pre_in, pre_out, mode = "three-box", parts = "body,left,right";
    preprocess->add_option("--in", pre_in, "input dataset")->required();
    preprocess->add_option("--out", pre_out, "output dataset")->required();
    preprocess->add_option("--mode", mode, "none|one-box|two-box|three-box");
    preprocess->add_option("--parts", parts, "comma list of body,left,right");

    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string config_path, train_path, val_path, out_dir;
    train_cmd->add_option("--config", config_path, "run config (json)")->required();
    train_cmd->add_option("--train", train_path, "training dataset")->required();
    train_cmd->add_option("--val", val_path, "validation dataset")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ckpt, data, topk = "1,5", metrics_out;
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--data", data, "dataset path")->required();
    eval_cmd->add_option("--topk", topk, "comma list of k values");
    eval_cmd->add_option("--out", metrics_out, "metrics output path (default <ckpt>.metrics.json)");

    auto* predict = app.add_subcommand("predict", "rank classes for input sequences");
    std::string pred_ckpt, pred_in;
    std::size_t top = 5;
    predict->add_option("--ckpt", pred_ckpt, "checkpoint path")->required();
    predict->add_option("--input", pred_in, "input dataset")->required();
    predict->add_option("--top", top, "ranked classes per record");

    auto* params_cmd = app.add_subcommand("params", "print the parameter table for a config");
    std::string params_config;
    params_cmd->add_option("--config", params_config, "run config (json)")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "check gradients against finite differences");
    std::string grad_config;
    double tolerance = 1e-4;
    gradcheck->add_option("--config", grad_config, "run config (json); omit for the built-in small one");
    gradcheck->add_option("--tolerance", tolerance, "max relative error allowed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: usage: " << e.what() << "\n";
        return 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(classes, samples, seed, out);
        if (preprocess->parsed()) return cmd_preprocess(pre_in, pre_out, mode, parts);
        if (train_cmd->parsed()) return cmd_train(config_path, train_path, val_path, out_dir);
        if (eval_cmd->parsed()) return cmd_eval(ckpt, data, topk, metrics_out);
        if (predict->parsed()) return cmd_predict(pred_ckpt, pred_in, top);
        if (params_cmd->parsed()) return cmd_params(params_config);
        if (gradcheck->parsed()) return cmd_gradcheck(grad_config, tolerance);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return is_validation_error(e.kind()) ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
