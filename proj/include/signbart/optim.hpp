#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "signbart/error.hpp"
#include "signbart/tensor.hpp"

namespace signbart {

/// Linear warmup from 0 to base_lr, then cosine annealing down to min_lr.
struct LrSchedule {
    double base_lr = 2e-4;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;
    double min_lr = 0.0;

    void validate() const {
        if (warmup_steps >= total_steps) {
            throw ParameterError("lr schedule: warmup_steps (" + std::to_string(warmup_steps) +
                                 ") must be < total_steps (" + std::to_string(total_steps) + ")");
        }
        if (base_lr < 0.0 || min_lr < 0.0 || min_lr > base_lr) {
            throw ParameterError("lr schedule: need 0 <= min_lr <= base_lr");
        }
    }
};

// Steps past total_steps clamp to min_lr.
inline double lr_at(const LrSchedule& schedule, std::size_t step) {
    schedule.validate();
    if (step < schedule.warmup_steps) {
        return schedule.base_lr * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
    }
    if (step >= schedule.total_steps) {
        return schedule.min_lr;
    }
    const double progress = static_cast<double>(step - schedule.warmup_steps) /
                            static_cast<double>(schedule.total_steps - schedule.warmup_steps);
    constexpr double kPi = 3.14159265358979323846;
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + std::cos(kPi * progress));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// name and zero-initialized on first sight; the step counter is shared by
/// all parameters and increments once per step() call. Gradients are left
/// untouched (the caller zeroes them).
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    const AdamWConfig& config() const { return config_; }
    std::size_t step_count() const { return step_; }

    void step(NamedTensors& params, double lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        for (auto& [name, param] : params) {
            if (!param.has_grad()) {
                throw ContractError("adamw: parameter '" + name + "' has no gradient populated");
            }
            auto& slot = slots_[name];
            auto& value = param.data();
            const auto& grad = param.grad();
            if (slot.m.empty()) {
                slot.m.assign(value.size(), 0.0);
                slot.v.assign(value.size(), 0.0);
            }
            if (slot.m.size() != value.size()) {
                throw ContractError("adamw: state shape mismatch for parameter '" + name + "'");
            }
            for (std::size_t i = 0; i < value.size(); ++i) {
                // decoupled decay, applied separately from the adaptive update
                value[i] -= lr * config_.weight_decay * value[i];
                slot.m[i] = config_.beta1 * slot.m[i] + (1.0 - config_.beta1) * grad[i];
                slot.v[i] = config_.beta2 * slot.v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
                const double m_hat = slot.m[i] / bc1;
                const double v_hat = slot.v[i] / bc2;
                value[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
            }
            detail::ensure_finite(value, "adamw");
        }
    }

private:
    struct Slot {
        std::vector<double> m, v;
    };

    AdamWConfig config_;
    std::map<std::string, Slot> slots_;
    std::size_t step_ = 0;
};

inline void zero_grads(NamedTensors& params) {
    for (auto& [name, param] : params) {
        (void)name;
        param.zero_grad();
    }
}

}  // namespace signbart
