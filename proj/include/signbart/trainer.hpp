#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "signbart/checkpoint.hpp"
#include "signbart/model.hpp"
#include "signbart/optim.hpp"
#include "signbart/skeleton.hpp"
#include "signbart/tensor.hpp"

namespace signbart {

struct TrainConfig {
    std::size_t batch_size = 128;
    double base_lr = 2e-4;
    double weight_decay = 1e-2;
    std::size_t epochs = 30;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 0;
    double min_lr = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (batch_size < 1) throw ParameterError("train config: batch_size must be >= 1");
        if (epochs < 1) throw ParameterError("train config: epochs must be >= 1");
        if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
            throw ParameterError("train config: warmup_fraction must be in [0, 1)");
        }
        if (base_lr <= 0.0) throw ParameterError("train config: base_lr must be > 0");
        if (min_lr < 0.0 || min_lr > base_lr) {
            throw ParameterError("train config: need 0 <= min_lr <= base_lr");
        }
    }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_top1 = 0.0;
    double val_top5 = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

using RunLog = std::vector<EpochRecord>;

inline std::string runlog_to_jsonl(const RunLog& log) {
    std::string out;
    for (const auto& r : log) {
        nlohmann::ordered_json j;
        j["epoch"] = r.epoch;
        j["train_loss"] = r.train_loss;
        j["train_acc"] = r.train_acc;
        j["val_top1"] = r.val_top1;
        j["val_top5"] = r.val_top5;
        j["lr"] = r.lr;
        j["seconds"] = r.seconds;
        out += j.dump();
        out += '\n';
    }
    return out;
}

/// Mean over the batch of -log softmax(logits)[label], fused through
/// log-sum-exp. Gradient w.r.t. the logits is (softmax - one_hot) / B.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    auto probs = std::make_shared<std::vector<double>>(batch * classes);
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
            throw ContractError("cross_entropy: label " + std::to_string(labels[b]) +
                                " out of range for " + std::to_string(classes) + " classes");
        }
        const double* row = logits.data().data() + b * classes;
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            (*probs)[b * classes + c] = std::exp(row[c] - mx);
            sum += (*probs)[b * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] /= sum;
        total += mx + std::log(sum) - row[static_cast<std::size_t>(labels[b])];
    }
    Tensor loss = Tensor::scalar(total / static_cast<double>(batch));
    if (detail::track_out({&logits})) {
        loss.node()->tracked = true;
        auto ln = logits.node(), on = loss.node();
        auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels);
        Tape::active()->record([ln, on, probs, labels_copy, batch, classes] {
            if (on->grad.empty()) return;
            const double g = on->grad[0] / static_cast<double>(batch);
            auto& gx = detail::grad_buf(*ln);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < classes; ++c) {
                    const double one_hot = static_cast<std::size_t>((*labels_copy)[b]) == c ? 1.0 : 0.0;
                    gx[b * classes + c] += g * ((*probs)[b * classes + c] - one_hot);
                }
            }
        });
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of rows whose true label ranks within the top k scores. Ties are
/// broken by the lower class index.
inline std::map<std::size_t, double> recall_at_k(const Tensor& scores,
                                                 const std::vector<std::int64_t>& labels,
                                                 const std::vector<std::size_t>& k_values) {
    if (scores.rank() != 2 || scores.dim(0) != labels.size()) {
        throw DimensionError("recall_at_k: scores " + shape_str(scores.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = scores.dim(0), classes = scores.dim(1);
    for (std::size_t k : k_values) {
        if (k < 1 || k > classes) {
            throw ParameterError("recall_at_k: k=" + std::to_string(k) + " outside [1, " +
                                 std::to_string(classes) + "]");
        }
    }
    std::map<std::size_t, double> result;
    for (std::size_t k : k_values) result[k] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = scores.data().data() + i * classes;
        const std::size_t truth = static_cast<std::size_t>(labels[i]);
        if (labels[i] < 0 || truth >= classes) {
            throw ContractError("recall_at_k: label " + std::to_string(labels[i]) + " out of range");
        }
        // rank of the true class under (score desc, index asc)
        std::size_t rank = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (row[c] > row[truth] || (row[c] == row[truth] && c < truth)) ++rank;
        }
        for (std::size_t k : k_values) {
            if (rank < k) result[k] += 1.0;
        }
    }
    for (auto& [k, v] : result) {
        (void)k;
        v /= static_cast<double>(n);
    }
    return result;
}

/// Eval-mode class probabilities for a list of sequences, in input order.
inline Tensor run_inference(const ModelParameters& params, const std::vector<SkeletonSequence>& seqs,
                            std::size_t batch_size = 64) {
    if (seqs.empty()) throw ParameterError("run_inference: empty dataset");
    const std::size_t classes = params.config().num_classes;
    Tensor all = Tensor::zeros({seqs.size(), classes});
    for (std::size_t begin = 0; begin < seqs.size(); begin += batch_size) {
        const std::size_t end = std::min(begin + batch_size, seqs.size());
        std::vector<SkeletonSequence> chunk(seqs.begin() + begin, seqs.begin() + end);
        Batch batch = pad_batch(chunk, params.config().max_len, /*require_labels=*/false);
        Tensor probs = forward(batch, params, nullptr, false);
        std::copy(probs.data().begin(), probs.data().end(), all.data().begin() + begin * classes);
    }
    return all;
}

inline std::map<std::size_t, double> evaluate(const ModelParameters& params,
                                              const std::vector<SkeletonSequence>& dataset,
                                              const std::vector<std::size_t>& k_values,
                                              std::size_t batch_size = 64) {
    if (dataset.empty()) throw ParameterError("evaluate: empty dataset");
    std::vector<std::int64_t> labels;
    labels.reserve(dataset.size());
    for (const auto& seq : dataset) {
        if (!seq.label.has_value()) {
            throw ContractError("evaluate: sequence '" + seq.id + "' has no label");
        }
        labels.push_back(*seq.label);
    }
    return recall_at_k(run_inference(params, dataset, batch_size), labels, k_values);
}

// ---------------------------------------------------------------------------
// Training loop

using Clock = std::function<double()>;  // monotonic seconds; injectable for tests

inline Clock steady_clock_seconds() {
    const auto start = std::chrono::steady_clock::now();
    return [start] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };
}

struct TrainResult {
    ModelParameters best_params;
    ModelParameters final_params;
    RunLog log;
    std::size_t steps = 0;
    std::size_t best_epoch = 0;  // 1-based
    double best_val_top1 = 0.0;
};

namespace detail {

inline void check_dataset_for_training(const std::vector<SkeletonSequence>& seqs,
                                       const ModelConfig& config, const char* split) {
    if (seqs.empty()) throw ParameterError(std::string("train: ") + split + " dataset is empty");
    for (const auto& seq : seqs) {
        if (!seq.label.has_value()) {
            throw ContractError(std::string("train: ") + split + " sequence '" + seq.id + "' has no label");
        }
        if (*seq.label < 0 || static_cast<std::size_t>(*seq.label) >= config.num_classes) {
            throw SchemaError(std::string("train: ") + split + " sequence '" + seq.id + "' has label " +
                              std::to_string(*seq.label) + ", model has " +
                              std::to_string(config.num_classes) + " classes");
        }
        if (seq.num_keypoints != config.num_keypoints) {
            throw SchemaError(std::string("train: ") + split + " sequence '" + seq.id + "' has " +
                              std::to_string(seq.num_keypoints) + " keypoints, model expects " +
                              std::to_string(config.num_keypoints));
        }
        if (!(seq.state == seqs.front().state)) {
            throw StateError(std::string("train: mixed states in ") + split + " dataset");
        }
    }
}

}  // namespace detail

/// Full training run: seeded init, per-epoch shuffle, AdamW with the
/// cosine-warmup schedule stepped once per batch, per-epoch validation, best
/// checkpoint kept by validation top-1. Deterministic per seed (the clock
/// only feeds the informational seconds column).
inline TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                         const std::vector<SkeletonSequence>& train_set,
                         const std::vector<SkeletonSequence>& val_set, Clock clock = {},
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    model_config.validate();
    train_config.validate();
    detail::check_dataset_for_training(train_set, model_config, "train");
    detail::check_dataset_for_training(val_set, model_config, "val");
    if (!(train_set.front().state == val_set.front().state)) {
        throw StateError("train: train state '" + train_set.front().state.str() +
                         "' differs from val state '" + val_set.front().state.str() + "'");
    }
    if (!clock) clock = steady_clock_seconds();

    const std::size_t n = train_set.size();
    const std::size_t steps_per_epoch = (n + train_config.batch_size - 1) / train_config.batch_size;
    const std::size_t total_steps = steps_per_epoch * train_config.epochs;
    LrSchedule schedule;
    schedule.base_lr = train_config.base_lr;
    schedule.total_steps = total_steps + 1;  // lr is queried with 1-based step indices
    schedule.warmup_steps =
        static_cast<std::size_t>(train_config.warmup_fraction * static_cast<double>(total_steps));
    schedule.min_lr = train_config.min_lr;

    Rng rng(train_config.seed);
    ModelParameters params(model_config, rng);
    AdamW optimizer({train_config.beta1, train_config.beta2, train_config.adam_eps,
                     train_config.weight_decay});
    const std::vector<std::size_t> top_ks{1, std::min<std::size_t>(5, model_config.num_classes)};

    TrainResult result{params.clone(), params, {}, 0, 0, -1.0};
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= train_config.epochs; ++epoch) {
        const double epoch_start = clock();
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        double last_lr = 0.0;
        for (std::size_t begin = 0; begin < n; begin += train_config.batch_size) {
            const std::size_t end = std::min(begin + train_config.batch_size, n);
            std::vector<SkeletonSequence> chunk;
            chunk.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) chunk.push_back(train_set[order[i]]);
            Batch batch = pad_batch(chunk, model_config.max_len);
            try {
                Tape tape;
                Tensor logits = forward_logits(batch, params, &rng, true);
                Tensor loss = cross_entropy(logits, batch.labels);
                loss_sum += loss.item() * static_cast<double>(end - begin);
                // training accuracy from the same pass (dropout active)
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    const double* row = logits.data().data() + b * model_config.num_classes;
                    std::size_t arg = 0;
                    for (std::size_t c = 1; c < model_config.num_classes; ++c) {
                        if (row[c] > row[arg]) arg = c;
                    }
                    correct += arg == static_cast<std::size_t>(batch.labels[b]) ? 1 : 0;
                }
                backward(loss, tape);
                last_lr = lr_at(schedule, optimizer.step_count() + 1);
                optimizer.step(params.named_mutable(), last_lr);
                zero_grads(params.named_mutable());
            } catch (const NumericError& e) {
                throw NumericError("training aborted at step " +
                                   std::to_string(optimizer.step_count() + 1) + ": " + e.message());
            }
        }
        std::map<std::size_t, double> val;
        try {
            val = evaluate(params, val_set, top_ks, train_config.batch_size);
        } catch (const NumericError& e) {
            throw NumericError("training aborted during validation after epoch " +
                               std::to_string(epoch) + ": " + e.message());
        }
        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(n);
        record.train_acc = static_cast<double>(correct) / static_cast<double>(n);
        record.val_top1 = val.at(1);
        record.val_top5 = val.at(top_ks[1]);
        record.lr = last_lr;
        record.seconds = clock() - epoch_start;
        result.log.push_back(record);
        if (on_epoch) on_epoch(record);
        if (record.val_top1 > result.best_val_top1) {
            result.best_val_top1 = record.val_top1;
            result.best_epoch = epoch;
            result.best_params = params.clone();
        }
    }
    result.final_params = params;
    result.steps = optimizer.step_count();
    return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    bool passed = false;
};

/// Compares every parameter's reverse-mode gradient against central finite
/// differences of the loss on a fixed small batch. `corrupt`, when given, is
/// applied to each analytic gradient before comparison (fault-injection seam
/// for tests). Requires a small config so the sweep stays tractable.
inline GradCheckReport gradient_check(
    const ModelConfig& config, double tolerance,
    const std::function<void(const std::string&, std::vector<double>&)>& corrupt = {}) {
    config.validate();
    const std::size_t param_count = count_parameters(config);
    if (param_count > 10000) {
        throw ParameterError("gradient_check: config has " + std::to_string(param_count) +
                             " parameters; finite differences need <= 10000");
    }
    Rng rng(1234567);
    ModelParameters params(config, rng);

    // fixed batch with one padded row so the masks participate
    const std::size_t batch_size = 2, t_len = 3, k = config.num_keypoints;
    Batch batch;
    batch.x_coords = Tensor::zeros({batch_size, t_len, k});
    batch.y_coords = Tensor::zeros({batch_size, t_len, k});
    batch.frame_mask = Tensor::zeros({batch_size, t_len});
    batch.lengths = {t_len, t_len - 1};
    for (std::size_t b = 0; b < batch_size; ++b) {
        batch.labels.push_back(static_cast<std::int64_t>(b % config.num_classes));
        for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
            batch.frame_mask.data()[b * t_len + t] = 1.0;
            for (std::size_t kp = 0; kp < k; ++kp) {
                batch.x_coords.data()[(b * t_len + t) * k + kp] = rng.uniform();
                batch.y_coords.data()[(b * t_len + t) * k + kp] = rng.uniform();
            }
        }
    }

    auto loss_value = [&] {
        return cross_entropy(forward_logits(batch, params, nullptr, false), batch.labels).item();
    };

    {
        Tape tape;
        Tensor loss = cross_entropy(forward_logits(batch, params, nullptr, false), batch.labels);
        backward(loss, tape);
    }

    GradCheckReport report;
    report.tolerance = tolerance;
    report.passed = true;
    const double h = 1e-5;
    for (auto& [name, tensor] : params.named_mutable()) {
        std::vector<double> analytic = tensor.grad();
        if (corrupt) corrupt(name, analytic);
        GradCheckEntry entry;
        entry.name = name;
        auto& values = tensor.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double f_plus = loss_value();
            values[i] = saved - h;
            const double f_minus = loss_value();
            values[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
            entry.max_rel_err = std::max(entry.max_rel_err, std::abs(analytic[i] - numeric) / denom);
        }
        entry.pass = entry.max_rel_err < tolerance;
        report.passed = report.passed && entry.pass;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace signbart
