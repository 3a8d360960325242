#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "visirnet/errors.hpp"
#include "visirnet/nn.hpp"

namespace visirnet {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (params.size() != grads.size()) throw ShapeMismatch("adam_step: parameter and gradient sizes differ");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw ShapeMismatch("adam_step: optimizer state does not match parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

/// Adam over a fixed set of trainable parameters; buffers are skipped.
class Adam {
public:
    Adam(std::vector<nn::Parameter*> params, double lr, AdamConfig cfg = {}) : lr_(lr), cfg_(cfg) {
        if (!(lr > 0)) throw ConfigError("learning rate must be > 0");
        for (auto* p : params) {
            if (p->trainable) params_.push_back(p);
        }
        states_.resize(params_.size());
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            adam_step(params_[i]->value, params_[i]->grad, states_[i], lr_, cfg_);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    double learning_rate() const noexcept { return lr_; }

private:
    double lr_;
    AdamConfig cfg_;
    std::vector<nn::Parameter*> params_;
    std::vector<AdamState> states_;
};

}  // namespace visirnet
