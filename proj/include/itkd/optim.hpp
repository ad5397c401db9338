#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "itkd/rng.hpp"
#include "itkd/tensor.hpp"

namespace itkd {

/// A named trainable leaf. Two network paths share a parameter iff they hold
/// the same id and the same underlying storage.
struct Parameter {
    std::string id;
    Tensor tensor;

    bool frozen() const { return tensor.frozen(); }
    void set_frozen(bool b) { tensor.set_frozen(b); }
};

inline Parameter make_parameter(std::string id, Shape shape, std::vector<double> values) {
    Tensor t = Tensor::from_values(std::move(shape), std::move(values), /*requires_grad=*/true);
    return Parameter{std::move(id), std::move(t)};
}

/// Deterministic initializer: each parameter draws from its own stream
/// derived from (seed, id), so init is independent of construction order
/// and identical ids get identical values across runs and configurations.
class ParamInit {
  public:
    explicit ParamInit(std::uint64_t seed) : seed_(seed) {}

    Parameter he_normal(const std::string& id, Shape shape, int fan_in) {
        Rng rng(mix_seed(seed_, id));
        double stddev = std::sqrt(2.0 / double(fan_in));
        std::vector<double> v(std::size_t(numel(shape)));
        for (auto& x : v) x = rng.normal(0.0, stddev);
        return make_parameter(id, std::move(shape), std::move(v));
    }

    Parameter constant(const std::string& id, Shape shape, double value) {
        std::vector<double> v(std::size_t(numel(shape)), value);
        return make_parameter(id, std::move(shape), std::move(v));
    }

  private:
    std::uint64_t seed_;
};

struct AdamConfig {
    double lr_max = 0.003;
    double lr_min = 0.0;
    std::int64_t total_steps = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline double cosine_lr(const AdamConfig& cfg, std::int64_t t) {
    double frac = cfg.total_steps > 0 ? double(std::min(t, cfg.total_steps)) / double(cfg.total_steps) : 1.0;
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Adam with cosine-annealed learning rate. Frozen parameters own no moment
/// buffers and are never written to.
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<Parameter> params, AdamConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        std::unordered_map<std::string, const detail::Node*> by_id;
        std::vector<Parameter> unique;
        for (auto& p : params_) {
            auto [it, inserted] = by_id.emplace(p.id, &p.tensor.node());
            if (!inserted) {
                if (it->second != &p.tensor.node())
                    throw Error(msg("optimizer: parameter id '", p.id,
                                    "' appears twice with distinct storage"));
                continue;  // same storage listed twice: keep one slot
            }
            unique.push_back(p);
        }
        params_ = std::move(unique);
        for (auto& p : params_)
            if (!p.frozen()) {
                auto n = std::size_t(p.tensor.size());
                moments_[p.id] = Slot{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
            }
    }

    double learning_rate(std::int64_t t) const { return cosine_lr(cfg_, t); }
    double current_learning_rate() const { return learning_rate(step_count_); }
    std::int64_t step_count() const { return step_count_; }
    const std::vector<Parameter>& params() const { return params_; }
    const AdamConfig& config() const { return cfg_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void step() {
        double lr = learning_rate(step_count_);
        double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_count_ + 1));
        double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_count_ + 1));
        for (auto& p : params_) {
            if (p.frozen()) continue;
            auto& node = p.tensor.node();
            if (node.grad.size() != node.values.size())
                throw Error(msg("optimizer: missing gradient buffer for '", p.id, "'"));
            auto& slot = moments_.at(p.id);
            for (std::size_t i = 0; i < node.values.size(); ++i) {
                double g = node.grad[i];
                slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
                slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mhat = slot.m[i] / bc1;
                double vhat = slot.v[i] / bc2;
                node.values[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
        ++step_count_;
    }

  private:
    struct Slot {
        std::vector<double> m, v;
    };

    std::vector<Parameter> params_;
    std::unordered_map<std::string, Slot> moments_;
    AdamConfig cfg_;
    std::int64_t step_count_ = 0;
};

}  // namespace itkd
