#pragma once

#include <string>
#include <utility>
#include <vector>

#include "espt/backbone.hpp"
#include "espt/ini.hpp"

namespace espt {

/// Piecewise-constant learning rate: entry (e, r) applies from epoch e on.
class LrSchedule {
public:
    LrSchedule() : steps_{{0, 0.01}} {}

    explicit LrSchedule(std::vector<std::pair<std::size_t, double>> steps) : steps_(std::move(steps)) { validate(); }

    void validate() const {
        if (steps_.empty()) throw ConfigError("learning-rate schedule must not be empty");
        if (steps_.front().first != 0) throw ConfigError("learning-rate schedule must start at epoch 0");
        for (std::size_t i = 0; i < steps_.size(); ++i) {
            if (!(steps_[i].second > 0.0)) throw ConfigError("learning rates must be positive");
            if (i > 0 && steps_[i].first <= steps_[i - 1].first) {
                throw ConfigError("learning-rate schedule epochs must be strictly increasing");
            }
        }
    }

    double rate(std::size_t epoch) const {
        double r = steps_.front().second;
        for (const auto& [e, v] : steps_) {
            if (e <= epoch) r = v;
        }
        return r;
    }

    const std::vector<std::pair<std::size_t, double>>& steps() const { return steps_; }

    /// "[0:0.1, 200:0.01]"
    static LrSchedule parse(const std::string& text) {
        std::vector<std::pair<std::size_t, double>> steps;
        for (const auto& item : ini::split_list(text)) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) throw ConfigError("schedule entry '" + item + "' is not epoch:rate");
            steps.emplace_back(ini::parse_value<std::size_t>(item.substr(0, colon), "lr_schedule"),
                               ini::parse_value<double>(item.substr(colon + 1), "lr_schedule"));
        }
        return LrSchedule(std::move(steps));
    }

    std::string format() const {
        std::string out = "[";
        for (std::size_t i = 0; i < steps_.size(); ++i) {
            if (i) out += ", ";
            out += std::to_string(steps_[i].first) + ":" + ini::format_value(steps_[i].second);
        }
        return out + "]";
    }

    bool operator==(const LrSchedule&) const = default;

private:
    std::vector<std::pair<std::size_t, double>> steps_;
};

struct SgdConfig {
    LrSchedule schedule;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool nesterov = true;

    bool operator==(const SgdConfig&) const = default;
};

/// SGD with (Nesterov) momentum and decoupled-from-slot weight decay:
///   g ← ∇ + wd·p (decayed params only);  v ← μ·v + g;
///   p ← p − lr·(g + μ·v)   (Nesterov)   or   p ← p − lr·v.
template <typename T>
class Sgd {
public:
    Sgd() = default;
    explicit Sgd(SgdConfig config) : config_(std::move(config)) {}

    const SgdConfig& config() const { return config_; }
    const std::vector<Tensor<T>>& velocity() const { return velocity_; }

    void step(ParamSet<T>& params, double lr) {
        if (velocity_.empty()) {
            for (const auto& p : params.items()) velocity_.emplace_back(p.var->shape());
        }
        if (velocity_.size() != params.size()) throw ContractError("optimizer slots do not match parameters");
        const T mu = static_cast<T>(config_.momentum);
        const T wd = static_cast<T>(config_.weight_decay);
        const T rate = static_cast<T>(lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params.items()[i];
            auto& v = velocity_[i];
            if (v.shape() != p.var->shape()) throw ContractError("velocity slot shape mismatch for " + p.name);
            auto& value = p.var->value;
            const bool has_grad = p.var->grad.numel() != 0;
            for (std::size_t j = 0; j < value.numel(); ++j) {
                T g = has_grad ? p.var->grad[j] : T{0};
                if (p.decay) g += wd * value[j];
                v[j] = mu * v[j] + g;
                const T update = config_.nesterov ? g + mu * v[j] : v[j];
                value[j] -= rate * update;
            }
        }
    }

private:
    SgdConfig config_;
    std::vector<Tensor<T>> velocity_;
};

}  // namespace espt
